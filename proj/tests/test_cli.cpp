#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "sacn/cli.hpp"

using namespace sacn;
using namespace sacn::test;

namespace {

struct CliRun {
  int rc;
  std::string out, err;
};

CliRun run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int rc = cli_main(std::move(args), out, err);
  return {rc, out.str(), err.str()};
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(bool(in));
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

const std::vector<std::string> kTinyTrain = {
    "--set", "model.conv_channels=8",  "--set", "caps.primary_channels=8",
    "--set", "caps.primary_dim=4",     "--set", "caps.class_dim=4",
    "--set", "decoder.hidden1=16",     "--set", "decoder.hidden2=16",
    "--set", "data.n=24",              "--set", "train.batch=4",
    "--set", "train.epochs=1"};

}  // namespace

TEST_CASE("gradcheck subcommand reports every group and exits zero") {
  const CliRun r = run({"gradcheck", "--out", "sacn_cli_gc"});
  CHECK(r.rc == 0);
  CHECK(r.out.find("gradcheck passed") != std::string::npos);
  for (const char* g : {"conv1.weight", "attn.w_f", "attn.w_g", "attn.w_h", "attn.alpha",
                        "caps.weight", "decoder.w3"})
    CHECK(r.out.find(std::string("group ") + g + " ") != std::string::npos);
  const std::string resolved = slurp("sacn_cli_gc/resolved-config");
  CHECK(resolved.find("model.conv_channels=8\n") != std::string::npos);
  std::filesystem::remove_all("sacn_cli_gc");
}

TEST_CASE("train twice with the same seed writes byte-identical artifacts") {
  for (const char* dir : {"sacn_cli_a", "sacn_cli_b"}) {
    std::vector<std::string> args = {"train", "--preset", "synthetic-simple",
                                     "--seed", "7",        "--no-timing",
                                     "--out",  dir};
    args.insert(args.end(), kTinyTrain.begin(), kTinyTrain.end());
    const CliRun r = run(std::move(args));
    CHECK(r.rc == 0);
    CHECK(r.out.find("trained 5 steps") != std::string::npos);
  }
  for (const char* leaf : {"metrics.csv", "checkpoint.ckpt", "resolved-config"}) {
    INFO(leaf);
    CHECK(slurp(std::string("sacn_cli_a/") + leaf) ==
          slurp(std::string("sacn_cli_b/") + leaf));
  }
  const std::string csv = slurp("sacn_cli_a/metrics.csv");
  CHECK(csv.rfind("step,epoch,split,l_m,l_r,l_t,accuracy,seconds\n", 0) == 0);
  CHECK(slurp("sacn_cli_a/resolved-config").find("train.seed=7\n") != std::string::npos);
  std::filesystem::remove_all("sacn_cli_b");
}

TEST_CASE("eval hits the trained checkpoint and misses cleanly") {
  const CliRun miss =
      run({"eval", "--checkpoint", "no/such/file.ckpt", "--out", "sacn_cli_e"});
  CHECK(miss.rc == 2);
  CHECK(miss.err.find("no/such/file.ckpt") != std::string::npos);

  const CliRun hit = run({"eval", "--checkpoint", "sacn_cli_a/checkpoint.ckpt", "--split",
                          "val", "--out", "sacn_cli_e"});
  CHECK(hit.rc == 0);
  CHECK(hit.out.find("split=val") != std::string::npos);
  CHECK(hit.out.find("accuracy=") != std::string::npos);

  const CliRun bad_split = run({"eval", "--checkpoint", "sacn_cli_a/checkpoint.ckpt",
                                "--split", "banana", "--out", "sacn_cli_e"});
  CHECK(bad_split.rc == 1);
  std::filesystem::remove_all("sacn_cli_e");
  std::filesystem::remove_all("sacn_cli_a");
}

TEST_CASE("usage mistakes exit one with a message") {
  CHECK(run({"frobnicate"}).rc == 1);
  CHECK(run({}).rc == 1);
  CHECK(run({"--help"}).rc == 0);

  const CliRun bad_key =
      run({"train", "--set", "caps.banana=1", "--out", "sacn_cli_u"});
  CHECK(bad_key.rc == 1);
  CHECK(bad_key.err.find("caps.banana") != std::string::npos);

  CHECK(run({"train", "--set", "no-equals-sign", "--out", "sacn_cli_u"}).rc == 1);
  CHECK(run({"eval", "--out", "sacn_cli_u"}).rc == 1);  // --checkpoint is required
  CHECK(run({"train", "--kernels", "quantum", "--out", "sacn_cli_u"}).rc == 1);
  std::filesystem::remove_all("sacn_cli_u");
}

TEST_CASE("data synth-gen is deterministic and inspect counts the splits") {
  for (const char* dir : {"sacn_cli_d1", "sacn_cli_d2"}) {
    const CliRun r = run({"data", "synth-gen", "--kind", "complex", "--n", "20", "--seed",
                          "1", "--out", dir});
    CHECK(r.rc == 0);
    CHECK(r.out.find("wrote 20 images") != std::string::npos);
  }
  for (const char* leaf : {"images.idx", "labels.idx", "manifest.tsv"}) {
    INFO(leaf);
    CHECK(slurp(std::string("sacn_cli_d1/") + leaf) ==
          slurp(std::string("sacn_cli_d2/") + leaf));
  }
  const CliRun ins = run({"data", "inspect", "--manifest", "sacn_cli_d1/manifest.tsv"});
  CHECK(ins.rc == 0);
  CHECK(ins.out.find("rows=20 train=16 val=2 test=2") != std::string::npos);
  CHECK(ins.out.find("label0=10 label1=10") != std::string::npos);

  CHECK(run({"data", "synth-gen", "--kind", "banana", "--out", "sacn_cli_d1"}).rc == 1);
  CHECK(run({"data", "inspect", "--manifest", "sacn_cli_d1/no-such.tsv"}).rc == 2);

  // split regenerates a manifest for an existing image set
  const CliRun sp =
      run({"data", "split", "--dir", "sacn_cli_d1", "--seed", "5", "--out", "sacn_cli_d2"});
  CHECK(sp.rc == 0);
  const CliRun ins2 = run({"data", "inspect", "--manifest", "sacn_cli_d2/manifest.tsv"});
  CHECK(ins2.out.find("rows=20 train=16 val=2 test=2") != std::string::npos);
  // a fresh seed reshuffles which sources land where
  CHECK(slurp("sacn_cli_d2/manifest.tsv") != slurp("sacn_cli_d1/manifest.tsv"));
  std::filesystem::remove_all("sacn_cli_d1");
  std::filesystem::remove_all("sacn_cli_d2");
}

TEST_CASE("data extract-patches cuts thirty per region and splits by source") {
  const std::string dir = "sacn_cli_med";
  std::filesystem::create_directories(dir);
  std::vector<Tensor<float>> pixels;
  std::vector<std::size_t> labels;
  Tensor<float> allow({24, 24});
  for (std::size_t i = 0; i < allow.numel(); ++i) allow[i] = 1.0f;
  for (std::size_t i = 0; i < 10; ++i) {
    Tensor<float> img({1, 24, 24});
    for (std::size_t p = 0; p < img.numel(); ++p)
      img[p] = float((p * 13 + i * 7) % 200) / 199.0f;
    pixels.push_back(std::move(img));
    labels.push_back(i % 2);
    save_pgm(dir + "/mask-lesion-" + std::to_string(i) + ".pgm", allow);
    save_pgm(dir + "/mask-normal-" + std::to_string(i) + ".pgm", allow);
  }
  save_idx_images(dir + "/images.idx", pixels);
  save_idx_labels(dir + "/labels.idx", labels);

  const CliRun r = run({"data", "extract-patches", "--dir", dir, "--seed", "3", "--out",
                        "sacn_cli_patches"});
  CHECK(r.rc == 0);
  CHECK(r.out.find("extracted 600 patches") != std::string::npos);
  const CliRun ins =
      run({"data", "inspect", "--manifest", "sacn_cli_patches/manifest.tsv"});
  CHECK(ins.out.find("rows=600 train=480 val=60 test=60") != std::string::npos);

  // no source image may straddle splits
  const DatasetManifest m = read_manifest("sacn_cli_patches/manifest.tsv");
  std::map<std::string, Split> owner;
  for (const auto& row : m.rows) {
    auto it = owner.find(row.source_image);
    if (it == owner.end())
      owner.emplace(row.source_image, row.split);
    else
      CHECK(it->second == row.split);
  }
  CHECK(owner.size() == 10);

  CHECK(run({"data", "extract-patches", "--dir", "no-such-dir", "--out",
             "sacn_cli_patches"}).rc == 2);
  std::filesystem::remove_all(dir);
  std::filesystem::remove_all("sacn_cli_patches");
}

TEST_CASE("export_attention maps are flat for ties and sharp for one-hots") {
  Tensor<double> beta({4, 4});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) beta.at(i, j) = 0.25;
  const Tensor<double> flat = export_attention(beta, 2, 2, 2);
  for (std::size_t i = 0; i < flat.numel(); ++i) CHECK(flat[i] == 0.0);

  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) beta.at(i, j) = (i == 3) ? 1.0 : 0.0;
  const Tensor<double> sharp = export_attention(beta, 1, 2, 2);
  for (std::size_t i = 0; i < sharp.numel(); ++i)
    CHECK(sharp[i] == ((i == 3) ? 1.0 : 0.0));

  CHECK_THROWS_AS(export_attention(beta, 9, 2, 2), std::invalid_argument);
}

TEST_CASE("export-attn reproduces the frozen golden map") {
  const std::string ckpt = std::string(SACN_SOURCE_DIR) + "/tests/fixtures/golden.ckpt";
  const CliRun r = run({"--kernels", "scalar", "export-attn", "--checkpoint", ckpt,
                        "--index", "0", "--loc", "6,6", "--out", "sacn_cli_attn"});
  CHECK(r.rc == 0);
  CHECK(r.out.find("attn-0-r6c6.pgm") != std::string::npos);
  CHECK(slurp("sacn_cli_attn/attn-0-r6c6.pgm") ==
        slurp(std::string(SACN_SOURCE_DIR) + "/tests/fixtures/golden_attn.pgm"));

  const CliRun oob = run({"export-attn", "--checkpoint", ckpt, "--index", "0", "--loc",
                          "99,0", "--out", "sacn_cli_attn"});
  CHECK(oob.rc == 1);
  CHECK(oob.err.find("99,0") != std::string::npos);

  const CliRun garbled = run({"export-attn", "--checkpoint", ckpt, "--index", "0",
                              "--loc", "banana", "--out", "sacn_cli_attn"});
  CHECK(garbled.rc == 1);
  kernels::select(kernels::Backend::Auto);
  std::filesystem::remove_all("sacn_cli_attn");
}
