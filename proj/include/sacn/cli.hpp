#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sacn/attention.hpp"
#include "sacn/checkpoint.hpp"
#include "sacn/config.hpp"
#include "sacn/data.hpp"
#include "sacn/kernels.hpp"
#include "sacn/model.hpp"
#include "sacn/train.hpp"

namespace sacn {

// Exit codes: 0 ok, 1 usage (flags, config keys, bounds), 2 data
// (missing/corrupt files), 3 numeric (failed check, training abort).

namespace cli {

struct CommonOpts {
  std::string preset;
  std::string config_file;
  std::vector<std::string> sets;
  std::string out_dir = "out";
  std::int64_t seed = -1;  // <0: keep the config's seed
  bool no_timing = false;
};

inline void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--preset", o.preset, "named starting config");
  cmd->add_option("--config", o.config_file, "config file applied over the preset");
  cmd->add_option("--set", o.sets, "override, dotted key=value; repeatable");
  cmd->add_option("--out", o.out_dir, "artifact directory")->capture_default_str();
  cmd->add_option("--seed", o.seed, "root seed (shorthand for train.seed)");
  cmd->add_flag("--no-timing", o.no_timing, "zero the wall-clock column in metrics");
}

inline RunConfig resolve(const CommonOpts& o) {
  RunConfig cfg = o.preset.empty() ? RunConfig{} : preset_config(o.preset);
  if (!o.config_file.empty()) {
    std::ifstream in(o.config_file);
    if (!in) throw ConfigError("cannot open config file '" + o.config_file + "'");
    std::ostringstream text;
    text << in.rdbuf();
    apply_config_text(cfg, text.str());
  }
  for (const std::string& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw ConfigError("--set needs key=value, got '" + kv + "'");
    config_set(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed >= 0) cfg.seed = static_cast<std::uint64_t>(o.seed);
  validate_config(cfg);
  return cfg;
}

inline void write_resolved(const std::string& out_dir, const std::string& text) {
  std::filesystem::create_directories(out_dir);
  std::ofstream out(std::filesystem::path(out_dir) / "resolved-config");
  if (!out) throw DataError("cannot write resolved-config under '" + out_dir + "'");
  out << text;
}

inline std::string artifact(const std::string& out_dir, const std::string& leaf) {
  return (std::filesystem::path(out_dir) / leaf).string();
}

inline int cmd_train(const CommonOpts& o, bool early_stop, std::ostream& out) {
  const RunConfig cfg = resolve(o);
  write_resolved(o.out_dir, serialize_config(cfg));
  const TrainData data = build_dataset(cfg);
  SacnModel<float> model(cfg);
  std::ofstream csv(artifact(o.out_dir, "metrics.csv"));
  if (!csv) throw DataError("cannot write metrics.csv under '" + o.out_dir + "'");
  TrainOptions opts;
  opts.metrics = &csv;
  opts.timing = !o.no_timing;
  opts.checkpoint_path = artifact(o.out_dir, "checkpoint.ckpt");
  opts.early_stop = early_stop;
  const auto res = train(model, data, opts);
  out << "trained " << res.steps << " steps over " << res.epochs << " epochs, "
      << model.parameter_count() << " parameters\n";
  if (!res.final_val.split.empty())
    out << "final val: accuracy=" << std::setprecision(6) << res.final_val.accuracy
        << " l_t=" << res.final_val.l_t << '\n';
  out << "artifacts in " << o.out_dir << '\n';
  return 0;
}

inline int cmd_eval(const CommonOpts& o, const std::string& ckpt_path,
                    const std::string& split_s, std::ostream& out) {
  const Checkpoint ck = read_checkpoint(ckpt_path);
  RunConfig cfg = ck.config;
  for (const std::string& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw ConfigError("--set needs key=value, got '" + kv + "'");
    config_set(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  validate_config(cfg);
  write_resolved(o.out_dir, serialize_config(cfg));
  if (split_s != "train" && split_s != "val" && split_s != "test")
    throw std::invalid_argument("--split must be train, val, or test, got '" + split_s + "'");
  SacnModel<float> model(cfg);
  restore_checkpoint<float>(ck, model, nullptr, nullptr);
  const TrainData data = build_dataset(cfg);
  const Split split = split_from_name(split_s);
  const MetricsRecord m = evaluate(model, data, split);
  out << "split=" << m.split << " n=" << manifest_indices(data.manifest, split).size()
      << std::setprecision(6) << " accuracy=" << m.accuracy << " l_m=" << m.l_m
      << " l_r=" << m.l_r << " l_t=" << m.l_t << '\n';
  return 0;
}

inline int cmd_gradcheck(CommonOpts o, std::size_t routing_iters, std::ostream& out) {
  if (o.preset.empty() && o.config_file.empty()) o.preset = "miniature";
  RunConfig cfg = resolve(o);
  if (routing_iters > 0) cfg.routing_iters = routing_iters;
  write_resolved(o.out_dir, serialize_config(cfg));
  const GradcheckReport rep = gradcheck(cfg);
  for (const auto& g : rep.groups)
    out << "group " << g.name << " max_rel_err=" << std::setprecision(3)
        << std::scientific << g.max_rel_err << std::defaultfloat
        << (g.pass ? " pass" : " FAIL") << '\n';
  out << "gradcheck " << (rep.pass ? "passed" : "FAILED") << " (threshold "
      << rep.threshold << ", routing iters " << cfg.routing_iters << ")\n";
  return rep.pass ? 0 : 3;
}

inline int cmd_ablate(const CommonOpts& o, std::size_t seeds, std::ostream& out) {
  const RunConfig cfg = resolve(o);
  write_resolved(o.out_dir, serialize_config(cfg));
  const AblateReport rep = ablate<float>(cfg, seeds, &out);
  out << std::setprecision(6);
  for (const AblateArm* arm : {&rep.sacn, &rep.baseline})
    out << "mode=" << arm->mode << " mean=" << arm->mean << " std=" << arm->stddev << '\n';
  bool ok = true;
  if (cfg.data_dataset == "synthetic-complex") {
    ok = rep.sacn.mean >= rep.baseline.mean;
    out << "check: sacn mean >= baseline mean on complex data: "
        << (ok ? "pass" : "FAIL") << '\n';
  } else if (cfg.data_dataset == "synthetic-simple") {
    ok = std::abs(rep.sacn.mean - rep.baseline.mean) <= 0.02;
    out << "check: modes within 2 accuracy points on simple data: "
        << (ok ? "pass" : "FAIL") << '\n';
  }
  return ok ? 0 : 3;
}

struct SynthGenOpts {
  std::string kind = "simple";
  std::size_t n = 400;
  std::uint64_t seed = 42;
  std::string out_dir = "out";
};

inline void write_image_set(const std::string& out_dir,
                            const std::vector<LabeledImage>& images,
                            const DatasetManifest& manifest) {
  std::filesystem::create_directories(out_dir);
  std::vector<Tensor<float>> pixels;
  std::vector<std::size_t> labels;
  pixels.reserve(images.size());
  for (const auto& img : images) {
    pixels.push_back(img.pixels);
    labels.push_back(img.label);
  }
  save_idx_images(artifact(out_dir, "images.idx"), pixels);
  save_idx_labels(artifact(out_dir, "labels.idx"), labels);
  write_manifest(artifact(out_dir, "manifest.tsv"), manifest);
}

inline int cmd_data_synth_gen(const SynthGenOpts& g, std::ostream& out) {
  Rng rng = Rng::derive(g.seed, "data");
  std::vector<LabeledImage> images;
  if (g.kind == "simple")
    images = synth_simple(g.n, rng);
  else if (g.kind == "complex")
    images = synth_complex(g.n, rng);
  else
    throw std::invalid_argument("synth-gen kind must be simple or complex, got '" +
                                g.kind + "'");
  const DatasetManifest manifest = build_manifest(images, g.seed);
  write_image_set(g.out_dir, images, manifest);
  write_resolved(g.out_dir, "data.kind=" + g.kind + "\ndata.n=" + std::to_string(g.n) +
                                "\ntrain.seed=" + std::to_string(g.seed) + "\n");
  out << "wrote " << images.size() << " images to " << g.out_dir << '\n';
  return 0;
}

inline int cmd_data_extract_patches(const std::string& dir, std::uint64_t seed,
                                    const std::string& out_dir, std::ostream& out) {
  const TrainData d = load_medical_dir(dir, seed);
  write_image_set(out_dir, d.images, d.manifest);
  write_resolved(out_dir, "data.dir=" + dir + "\ntrain.seed=" + std::to_string(seed) + "\n");
  out << "extracted " << d.images.size() << " patches from " << dir << '\n';
  return 0;
}

inline int cmd_data_split(const std::string& dir, std::uint64_t seed,
                          const std::string& out_dir, std::ostream& out) {
  const std::vector<LabeledImage> images =
      load_idx(artifact(dir, "images.idx"), artifact(dir, "labels.idx"));
  const DatasetManifest manifest = build_manifest(images, seed);
  std::filesystem::create_directories(out_dir);
  write_manifest(artifact(out_dir, "manifest.tsv"), manifest);
  write_resolved(out_dir, "data.dir=" + dir + "\ntrain.seed=" + std::to_string(seed) + "\n");
  out << "assigned splits for " << images.size() << " images\n";
  return 0;
}

inline int cmd_data_inspect(const std::string& manifest_path, std::ostream& out) {
  const DatasetManifest m = read_manifest(manifest_path);
  std::size_t by_split[3] = {0, 0, 0};
  std::size_t label0 = 0, label1 = 0, other = 0;
  for (const auto& row : m.rows) {
    ++by_split[static_cast<int>(row.split)];
    if (row.label == 0)
      ++label0;
    else if (row.label == 1)
      ++label1;
    else
      ++other;
  }
  out << "rows=" << m.rows.size() << " train=" << by_split[int(Split::Train)]
      << " val=" << by_split[int(Split::Val)] << " test=" << by_split[int(Split::Test)]
      << '\n';
  out << "label0=" << label0 << " label1=" << label1;
  if (other) out << " other=" << other;
  out << '\n';
  return 0;
}

inline int cmd_export_attn(const CommonOpts& o, const std::string& ckpt_path,
                           std::size_t index, const std::vector<std::string>& locs,
                           std::ostream& out) {
  const Checkpoint ck = read_checkpoint(ckpt_path);
  const RunConfig& cfg = ck.config;
  if (cfg.model_mode != "sacn")
    throw std::invalid_argument("checkpoint was trained without attention");
  SacnModel<float> model(cfg);
  restore_checkpoint<float>(ck, model, nullptr, nullptr);
  const TrainData data = build_dataset(cfg);
  if (index >= data.images.size())
    throw std::invalid_argument("sample index " + std::to_string(index) +
                                " out of range for " + std::to_string(data.images.size()) +
                                " images");
  write_resolved(o.out_dir, serialize_config(cfg));

  Tensor<float> batch({1, cfg.input_channels, cfg.input_height, cfg.input_width});
  const Tensor<float>& px = data.images[index].pixels;
  for (std::size_t i = 0; i < px.numel(); ++i) batch[i] = px[i];
  Tape<float> t;
  auto f = model.forward(t, batch);
  const Tensor<float>& beta = t.value(f.attention->beta);
  const std::size_t n = beta.extent(1);
  Tensor<float> slice({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) slice.at(i, j) = beta.at(0, i, j);

  const std::size_t fh = model.dims().feat_h, fw = model.dims().feat_w;
  for (const std::string& loc : locs) {
    const auto comma = loc.find(',');
    if (comma == std::string::npos)
      throw std::invalid_argument("--loc needs row,col, got '" + loc + "'");
    std::size_t r = 0, c = 0;
    try {
      r = std::stoul(loc.substr(0, comma));
      c = std::stoul(loc.substr(comma + 1));
    } catch (const std::exception&) {
      throw std::invalid_argument("--loc needs row,col, got '" + loc + "'");
    }
    if (r >= fh || c >= fw)
      throw std::invalid_argument("query location " + loc + " outside the " +
                                  std::to_string(fh) + "x" + std::to_string(fw) +
                                  " feature map");
    const Tensor<float> map = export_attention(slice, r * fw + c, fh, fw);
    const std::string path = artifact(
        o.out_dir, "attn-" + std::to_string(index) + "-r" + std::to_string(r) + "c" +
                       std::to_string(c) + ".pgm");
    save_pgm(path, map);
    out << "wrote " << path << '\n';
  }
  return 0;
}

}  // namespace cli

inline int cli_main(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"self-attention capsule network runner", "sacn"};
  app.require_subcommand(1);

  cli::CommonOpts train_o, eval_o, grad_o, abl_o, attn_o;
  bool early_stop = false;
  std::string eval_ckpt, eval_split = "test";
  std::size_t grad_iters = 0;
  std::size_t abl_seeds = 3;
  std::string attn_ckpt;
  std::size_t attn_index = 0;
  std::vector<std::string> attn_locs;
  cli::SynthGenOpts synth_o;
  std::string patches_dir, split_dir, inspect_manifest;
  std::uint64_t patches_seed = 42, split_seed = 42;
  std::string patches_out = "out", split_out = "out";
  std::string backend = "auto";
  app.add_option("--kernels", backend, "kernel backend: auto | scalar | avx2")
      ->capture_default_str();

  std::function<int()> action;

  auto* tr = app.add_subcommand("train", "train a model and write artifacts");
  cli::add_common(tr, train_o);
  tr->add_flag("--early-stop", early_stop, "stop after 5 stale validation epochs");
  tr->callback([&] { action = [&] { return cli::cmd_train(train_o, early_stop, out); }; });

  auto* ev = app.add_subcommand("eval", "score a checkpoint on a split");
  cli::add_common(ev, eval_o);
  ev->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  ev->add_option("--split", eval_split, "train | val | test")->capture_default_str();
  ev->callback([&] { action = [&] { return cli::cmd_eval(eval_o, eval_ckpt, eval_split, out); }; });

  auto* gc = app.add_subcommand("gradcheck", "compare gradients against finite differences");
  cli::add_common(gc, grad_o);
  gc->add_option("--routing-iters", grad_iters, "override routing iterations");
  gc->callback([&] { action = [&] { return cli::cmd_gradcheck(grad_o, grad_iters, out); }; });

  auto* ab = app.add_subcommand("ablate", "paired attention-on/off comparison");
  cli::add_common(ab, abl_o);
  ab->add_option("--seeds", abl_seeds, "number of seeds")->capture_default_str();
  ab->callback([&] { action = [&] { return cli::cmd_ablate(abl_o, abl_seeds, out); }; });

  auto* da = app.add_subcommand("data", "dataset tooling");
  da->require_subcommand(1);
  auto* sg = da->add_subcommand("synth-gen", "write a synthetic image set");
  sg->add_option("--kind", synth_o.kind, "simple | complex")->capture_default_str();
  sg->add_option("--n", synth_o.n, "image count")->capture_default_str();
  sg->add_option("--seed", synth_o.seed, "root seed")->capture_default_str();
  sg->add_option("--out", synth_o.out_dir, "output directory")->capture_default_str();
  sg->callback([&] { action = [&] { return cli::cmd_data_synth_gen(synth_o, out); }; });

  auto* ep = da->add_subcommand("extract-patches", "cut patches from an annotated set");
  ep->add_option("--dir", patches_dir, "annotated set directory")->required();
  ep->add_option("--seed", patches_seed, "root seed")->capture_default_str();
  ep->add_option("--out", patches_out, "output directory")->capture_default_str();
  ep->callback([&] {
    action = [&] { return cli::cmd_data_extract_patches(patches_dir, patches_seed, patches_out, out); };
  });

  auto* sp = da->add_subcommand("split", "assign image-level splits");
  sp->add_option("--dir", split_dir, "directory holding images.idx/labels.idx")->required();
  sp->add_option("--seed", split_seed, "root seed")->capture_default_str();
  sp->add_option("--out", split_out, "output directory")->capture_default_str();
  sp->callback([&] {
    action = [&] { return cli::cmd_data_split(split_dir, split_seed, split_out, out); };
  });

  auto* in = da->add_subcommand("inspect", "summarize a manifest");
  in->add_option("--manifest", inspect_manifest, "manifest.tsv path")->required();
  in->callback([&] { action = [&] { return cli::cmd_data_inspect(inspect_manifest, out); }; });

  auto* xa = app.add_subcommand("export-attn", "write attention maps as PGM files");
  cli::add_common(xa, attn_o);
  xa->add_option("--checkpoint", attn_ckpt, "checkpoint file")->required();
  xa->add_option("--index", attn_index, "dataset sample index")->capture_default_str();
  xa->add_option("--loc", attn_locs, "query location row,col; repeatable")->required();
  xa->callback([&] {
    action = [&] { return cli::cmd_export_attn(attn_o, attn_ckpt, attn_index, attn_locs, out); };
  });

  std::reverse(args.begin(), args.end());
  try {
    app.parse(std::move(args));
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, out, err);
    return rc == 0 ? 0 : 1;
  }

  try {
    kernels::select(kernels::parse_backend(backend));
    return action ? action() : 1;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 1;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return 2;
  } catch (const TrainError& e) {
    err << "numeric error: " << e.what() << '\n';
    return 3;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace sacn
