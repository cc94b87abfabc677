// agmm: data generation, training, evaluation, ablation, two-stage training
// and oracle verification from one binary.
//
// Exit codes: 0 success, 1 usage or config error, 2 numeric divergence,
// 3 verification failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "agmm/cli/manifest.hpp"
#include "agmm/train/experiments.hpp"
#include "agmm/verify/suites.hpp"

namespace fs = std::filesystem;
using namespace agmm;

namespace {

enum Exit { kOk = 0, kUsage = 1, kDiverged = 2, kOracle = 3 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Invocation {
  std::string command;
  TrainConfig cfg;
  std::map<std::string, std::string> opt;

  bool uses_config_out() const { return command == "train" || command == "ablate" || command == "mt"; }
  fs::path out_dir() const { return uses_config_out() ? fs::path(cfg.out_dir) : fs::path(opt.at("out")); }
  void set_out(const std::string& dir) {
    if (uses_config_out())
      cfg.out_dir = dir;
    else
      opt["out"] = dir;
  }
};

std::string get(const Invocation& inv, const std::string& key, const std::string& def = "") {
  auto it = inv.opt.find(key);
  return it == inv.opt.end() ? def : it->second;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');)
    if (!(tok = detail::trim(tok)).empty()) out.push_back(tok);
  return out;
}

void write_manifest(const Invocation& inv, const std::vector<std::string>& outputs) {
  RunManifest m;
  m.command = inv.command;
  m.seed = inv.cfg.seed;
  m.started = utc_timestamp();
  m.options = inv.opt;
  m.outputs = outputs;
  m.config = inv.cfg;
  m.write(inv.out_dir());
}

void print_metrics(const Metrics& m) {
  std::printf("%-10s %s\n", "class", "IoU");
  for (std::size_t c = 0; c < m.iou.size(); ++c) std::printf("%-10zu %.6f\n", c, m.iou[c]);
  std::printf("%-10s %.6f\n%-10s %.6f\n", "miou_P", m.miou_P, "pix_acc_P", m.pix_acc_P);
  if (m.has_G) std::printf("%-10s %.6f\n%-10s %.6f\n", "miou_G", m.miou_G, "pseudo_acc", m.pseudo_acc);
}

// ---------------------------------------------------------------------------
// Commands

int cmd_gen_data(const Invocation& inv) {
  const auto scenes = detail::parse_number<std::size_t>("scenes", get(inv, "scenes"));
  const auto mod = get(inv, "modality");
  std::vector<Modality> modalities;
  if (mod == "all")
    modalities = {Modality::image_level, Modality::point, Modality::scribble, Modality::block, Modality::box_seed};
  else
    for (const auto& m : split_list(mod)) modalities.push_back(parse_modality(m));
  write_manifest(inv, {"manifest.txt", "scene_*/"});
  write_corpus(inv.out_dir(), inv.cfg.scene, scenes, modalities, inv.cfg.weak, inv.cfg.data_seed);
  std::printf("wrote %zu scenes to %s\n", scenes, inv.out_dir().c_str());
  return kOk;
}

int cmd_train(const Invocation& inv) {
  write_manifest(inv, {"metrics.csv", "checkpoint/"});
  const auto rep = train(inv.cfg);
  std::printf("trained %d steps; metrics %s; checkpoint %s\n", rep.steps_run, rep.metrics_csv.c_str(),
              rep.checkpoint.c_str());
  print_metrics(rep.final_metrics);
  return kOk;
}

TrainData eval_data(TrainConfig& cfg, const std::string& corpus, int model_classes) {
  if (corpus.empty()) {
    cfg.scene.class_count = model_classes;
    return generate_split(cfg, true);
  }
  int classes = model_classes;
  if (fs::exists(fs::path(corpus) / kRunManifestName)) {
    const auto gm = RunManifest::read(fs::path(corpus) / kRunManifestName);
    if (gm.has_config) classes = gm.config.scene.class_count;
  }
  if (classes != model_classes)
    throw UsageError("checkpoint has " + std::to_string(model_classes) + " classes, corpus " + corpus + " has " +
                     std::to_string(classes));
  TrainData d;
  d.image_level = cfg.modality == Modality::image_level;
  bool all_weak = true;
  std::vector<WeakLabelMap> weak;
  for (auto& cs : load_corpus(corpus, classes)) {
    const WeakLabelMap* found = nullptr;
    for (const auto& w : cs.weak)
      if (w.modality == cfg.modality) found = &w;
    if (found)
      weak.push_back(*found);
    else
      all_weak = false;
    d.presence.push_back(cs.presence);
    d.scenes.push_back(std::move(cs.scene));
  }
  if (d.scenes.empty()) throw UsageError("corpus " + corpus + " is empty");
  if (!d.image_level && all_weak) d.weak = std::move(weak);
  return d;
}

int cmd_eval(const Invocation& inv) {
  const fs::path ck = get(inv, "checkpoint");
  write_manifest(inv, {"eval.csv"});
  TrainConfig cfg = inv.cfg;
  int model_classes = 0;
  {
    std::ifstream man(ck / "manifest.txt");
    if (!man) throw UsageError("missing checkpoint manifest in " + ck.string());
    std::string line;
    std::getline(man, line);
    const auto pos = line.find("classes=");
    if (pos == std::string::npos) throw UsageError("checkpoint manifest lacks a class count");
    model_classes = std::stoi(line.substr(pos + 8));
  }
  const auto data = eval_data(cfg, get(inv, "corpus"), model_classes);
  const auto m = evaluate_checkpoint(cfg, ck, data);
  print_metrics(m);
  std::ofstream csv(inv.out_dir() / "eval.csv", std::ios::binary);
  csv << "metric,value\n";
  for (std::size_t c = 0; c < m.iou.size(); ++c) csv << "iou_" << c << ',' << csv_number(m.iou[c]) << '\n';
  csv << "miou_P," << csv_number(m.miou_P) << "\npix_acc_P," << csv_number(m.pix_acc_P) << '\n';
  if (m.has_G) csv << "miou_G," << csv_number(m.miou_G) << "\npseudo_acc," << csv_number(m.pseudo_acc) << '\n';
  return kOk;
}

int cmd_ablate(const Invocation& inv) {
  const auto modes = parse_modes(get(inv, "modes"));
  const int seeds = detail::parse_number<int>("seeds", get(inv, "seeds"));
  write_manifest(inv, {"ablation.csv"});
  const auto table = ablate(inv.cfg, modes, seeds);
  std::ifstream is(table.csv);
  std::cout << is.rdbuf();
  return kOk;
}

int cmd_mt(const Invocation& inv) {
  write_manifest(inv, {"stage1/", "stage1/pseudo/", "stage2/"});
  const auto rep = multi_stage(inv.cfg);
  std::printf("stage 1: miou_P %.6f  miou_G %.6f\n", rep.stage1.final_metrics.miou_P, rep.stage1.final_metrics.miou_G);
  std::printf("stage 2: miou_P %.6f\n", rep.stage2.final_metrics.miou_P);
  return kOk;
}

int cmd_verify(const Invocation& inv) {
  const auto which = get(inv, "suite", "all");
  const auto names = which == "all" ? verify::suite_names() : split_list(which);
  const auto instances = detail::parse_number<std::size_t>("instances", get(inv, "instances", "0"));
  const auto seed = detail::parse_number<std::uint64_t>("seed", get(inv, "seed", "0"));
  for (const auto& n : names) {
    const auto& all = verify::suite_names();
    if (std::find(all.begin(), all.end(), n) == all.end()) throw UsageError("unknown verify suite: " + n);
  }
  write_manifest(inv, {"verify.txt"});
  std::ofstream log(inv.out_dir() / "verify.txt", std::ios::binary);
  std::vector<std::string> failing;
  for (const auto& n : names) {
    const auto rep = verify::run_suite(n, instances, seed);
    for (const auto& c : rep.checks) {
      const auto line = verify::format_check(n, c);
      std::cout << line << '\n' << std::flush;
      log << line << '\n';
    }
    if (!rep.pass()) failing.push_back(n);
  }
  std::string summary;
  if (failing.empty()) {
    summary = "verify passed: " + std::to_string(names.size()) + " suite(s)";
  } else {
    summary = "verify failed:";
    for (const auto& f : failing) summary += " " + f;
  }
  std::cout << summary << '\n';
  log << summary << '\n';
  return failing.empty() ? kOk : kOracle;
}

int execute(const Invocation& inv) {
  if (inv.command == "gen-data") return cmd_gen_data(inv);
  if (inv.command == "train") return cmd_train(inv);
  if (inv.command == "eval") return cmd_eval(inv);
  if (inv.command == "ablate") return cmd_ablate(inv);
  if (inv.command == "mt") return cmd_mt(inv);
  if (inv.command == "verify") return cmd_verify(inv);
  throw UsageError("cannot run command '" + inv.command + "'");
}

// ---------------------------------------------------------------------------
// Flag handling

struct ConfigFlags {
  std::string file;
  std::vector<std::string> sets;
  std::string out;

  void add_to(CLI::App* app, bool with_out = true) {
    app->add_option("-c,--config", file, "Config file of 'key = value' lines")->check(CLI::ExistingFile);
    app->add_option("-s,--set", sets, "Override one config key, as key=value (repeatable)");
    if (with_out) app->add_option("-o,--out", out, "Output directory (overrides out.dir)");
  }

  TrainConfig resolve() const {
    TrainConfig cfg = file.empty() ? TrainConfig{} : load_config(file);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      set_config_value(cfg, detail::trim(s.substr(0, eq)), detail::trim(s.substr(eq + 1)));
    }
    if (!out.empty()) cfg.out_dir = out;
    cfg.validate();
    return cfg;
  }
};

int run(int argc, char** argv) {
  CLI::App app{"Adaptive Gaussian-mixture weak supervision toolkit"};
  app.set_version_flag("--version", AGMM_VERSION);
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic corpus with weak labels");
  std::string gen_out = "data/corpus", gen_mod = "point";
  std::size_t gen_scenes = 100, gen_size = 64;
  TrainConfig gen_cfg;
  gen->add_option("-o,--out", gen_out, "Corpus directory")->capture_default_str();
  gen->add_option("--scenes", gen_scenes, "Number of scenes")->capture_default_str();
  gen->add_option("--size", gen_size, "Scene height and width")->capture_default_str()->check(CLI::Range(16, 4096));
  gen->add_option("--classes", gen_cfg.scene.class_count, "Classes including background")->capture_default_str();
  gen->add_option("--shapes", gen_cfg.scene.n_shapes, "Shapes per scene")->capture_default_str();
  gen->add_option("--noise", gen_cfg.scene.color_noise_std, "Colour noise std")->capture_default_str();
  gen->add_option("--texture", gen_cfg.scene.texture_amp, "Texture amplitude")->capture_default_str();
  gen->add_option("--modality", gen_mod, "image_level, point, scribble, block, box_seed, a comma list, or all")
      ->capture_default_str();
  gen->add_option("--clicks", gen_cfg.weak.clicks_per_class, "Clicks per class (point)")->capture_default_str();
  gen->add_option("--stroke-len", gen_cfg.weak.stroke_len, "Stroke length (scribble)")->capture_default_str();
  gen->add_option("--block-ratio", gen_cfg.weak.block_ratio, "Labelled tile ratio (block)")->capture_default_str();
  gen->add_option("--block-size", gen_cfg.weak.block_size, "Tile size (block)")->capture_default_str();
  gen->add_option("--seed", gen_cfg.data_seed, "Corpus seed")->capture_default_str();

  // train / mt
  auto* tr = app.add_subcommand("train", "Train one model");
  ConfigFlags tr_flags;
  tr_flags.add_to(tr);
  auto* mt = app.add_subcommand("mt", "Two-stage training: retrain a fresh model on dumped pseudo labels");
  ConfigFlags mt_flags;
  mt_flags.add_to(mt);

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ConfigFlags ev_flags;
  ev_flags.add_to(ev, false);
  std::string ev_ck, ev_corpus, ev_out = "runs/eval";
  ev->add_option("--checkpoint", ev_ck, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--corpus", ev_corpus, "Corpus directory (default: generated held-out scenes)")
      ->check(CLI::ExistingDirectory);
  ev->add_option("-o,--out", ev_out, "Directory for the manifest and eval.csv")->capture_default_str();

  // ablate
  auto* ab = app.add_subcommand("ablate", "Run an ablation matrix over modes and seeds");
  ConfigFlags ab_flags;
  ab_flags.add_to(ab);
  std::string ab_modes = "full,baseline";
  int ab_seeds = 5;
  ab->add_option("--modes", ab_modes, "Comma list of: baseline, l-self, l-weak, l-con, full, sg, label-assign, centers")
      ->capture_default_str();
  ab->add_option("--seeds", ab_seeds, "Seeds per mode, counting up from train.seed")->capture_default_str();

  // verify
  auto* vf = app.add_subcommand("verify", "Run oracle, anchor, gradient and online-EM checks");
  std::string vf_suite = "all", vf_out = "runs/verify";
  std::size_t vf_instances = 0;
  std::uint64_t vf_seed = 0;
  vf->add_option("--suite", vf_suite, "conv, gmm, loss, anchors, grad, oem, a comma list, or all")
      ->capture_default_str();
  vf->add_option("--instances", vf_instances, "Instances per check (0 = suite default)")->capture_default_str();
  vf->add_option("--seed", vf_seed, "First instance seed")->capture_default_str();
  vf->add_option("-o,--out", vf_out, "Directory for the manifest and verify.txt")->capture_default_str();

  // rerun
  auto* rr = app.add_subcommand("rerun", "Re-execute a run from its manifest");
  std::string rr_manifest, rr_out;
  rr->add_option("manifest", rr_manifest, "Manifest file or run directory")->required();
  rr->add_option("-o,--out", rr_out, "Write outputs here instead of the recorded directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  Invocation inv;
  if (*gen) {
    inv.command = "gen-data";
    gen_cfg.scene.height = gen_cfg.scene.width = gen_size;
    gen_cfg.modality = gen_mod == "all" || gen_mod.find(',') != std::string::npos ? gen_cfg.modality
                                                                                  : parse_modality(gen_mod);
    gen_cfg.validate();
    inv.cfg = gen_cfg;
    inv.opt = {{"out", gen_out}, {"scenes", std::to_string(gen_scenes)}, {"modality", gen_mod}};
  } else if (*tr) {
    inv = {"train", tr_flags.resolve(), {}};
  } else if (*mt) {
    inv = {"mt", mt_flags.resolve(), {}};
  } else if (*ev) {
    inv = {"eval", ev_flags.resolve(), {{"checkpoint", ev_ck}, {"out", ev_out}}};
    if (!ev_corpus.empty()) inv.opt["corpus"] = ev_corpus;
  } else if (*ab) {
    inv = {"ablate", ab_flags.resolve(), {{"modes", ab_modes}, {"seeds", std::to_string(ab_seeds)}}};
  } else if (*vf) {
    inv.command = "verify";
    inv.opt = {{"suite", vf_suite},
               {"instances", std::to_string(vf_instances)},
               {"seed", std::to_string(vf_seed)},
               {"out", vf_out}};
  } else if (*rr) {
    const auto m = RunManifest::read(rr_manifest);
    inv = {m.command, m.config, m.options};
    if (!rr_out.empty()) inv.set_out(rr_out);
    inv.cfg.validate();
  }
  return execute(inv);
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const DivergenceError& e) {
    std::cerr << "agmm: training diverged: " << e.what() << '\n';
    return kDiverged;
  } catch (const ConfigError& e) {
    std::cerr << "agmm: config error: " << e.what() << '\n';
    return kUsage;
  } catch (const UsageError& e) {
    std::cerr << "agmm: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "agmm: error: " << e.what() << '\n';
    return kUsage;
  }
}
