#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>

#include "s2rm/evalsuite.hpp"
#include "s2rm/gradsuite.hpp"
#include "s2rm/runconfig.hpp"
#include "s2rm/trainer.hpp"

namespace {

using namespace s2rm;

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;
constexpr int kExitCheckFailed = 3;

void write_effective_config(const RunConfig& cfg) {
  std::filesystem::create_directories(cfg.out_dir);
  std::ofstream out(cfg.out_dir + "/config.ini", std::ios::trunc);
  if (!out) throw Error("cannot write " + cfg.out_dir + "/config.ini");
  out << render_config(cfg);
}

std::unique_ptr<ForwardModel> build_model(const RunConfig& cfg) {
  return make_model(cfg.kind, cfg.s2rm, cfg.baseline, cfg.model_seed);
}

std::unique_ptr<ForwardModel> build_model_from_checkpoint(const RunConfig& cfg) {
  if (cfg.checkpoint.empty())
    throw ConfigError("a checkpoint is required (data.checkpoint or --ckpt)");
  auto model = build_model(cfg);
  load_checkpoint(cfg.checkpoint, model->params(), nullptr);
  return model;
}

int cmd_gen_data(const RunConfig& cfg) {
  write_effective_config(cfg);
  auto spec_for = [&](std::uint32_t seqs, std::uint32_t balls, std::uint64_t role) {
    DatasetSpec spec;
    spec.n_seq = seqs;
    spec.steps = cfg.gen.frames;
    spec.views_per_step = cfg.gen.views;
    spec.n_balls = balls;
    spec.master_seed = derive_seed(cfg.gen.seed, role);
    return spec;
  };
  const std::string dir = cfg.out_dir;
  generate_dataset(spec_for(cfg.gen.train_seqs, cfg.gen.balls, 1), dir + "/train.bin");
  std::cout << "wrote " << dir << "/train.bin (" << cfg.gen.train_seqs << " sequences, "
            << cfg.gen.balls << " balls)\n";
  generate_dataset(spec_for(cfg.gen.val_seqs, cfg.gen.balls, 2), dir + "/val.bin");
  std::cout << "wrote " << dir << "/val.bin (" << cfg.gen.val_seqs << " sequences)\n";
  for (std::uint32_t balls = 1; balls <= 6; ++balls) {
    if (balls == cfg.gen.balls) continue;
    const std::string path = dir + "/ood_" + std::to_string(balls) + ".bin";
    generate_dataset(spec_for(cfg.gen.ood_seqs, balls, 100 + balls), path);
    std::cout << "wrote " << path << " (" << cfg.gen.ood_seqs << " sequences, " << balls
              << " balls)\n";
  }
  return kExitOk;
}

int cmd_train(const RunConfig& cfg) {
  if (cfg.train_path.empty() || cfg.val_path.empty())
    throw ConfigError("train needs data.train and data.val");
  write_effective_config(cfg);
  DatasetReader train_data(cfg.train_path);
  DatasetReader val_data(cfg.val_path);
  auto model = build_model(cfg);
  TrainConfig tc = cfg.train;
  tc.threads = cfg.threads;
  TrainResult result = train(*model, train_data, val_data, tc, cfg.out_dir);
  std::cout << "best epoch " << result.best_epoch << ", validation loss "
            << result.best_val_loss << "\n";
  std::cout << "wrote " << cfg.out_dir << "/ckpt.bin and " << cfg.out_dir << "/epochs.csv\n";
  return kExitOk;
}

int cmd_eval(const RunConfig& cfg, bool with_references) {
  if (cfg.eval_paths.empty()) throw ConfigError("eval needs data.eval dataset paths");
  write_effective_config(cfg);
  auto model = build_model_from_checkpoint(cfg);
  std::vector<MetricsRow> rows;
  for (const std::string& path : cfg.eval_paths) {
    DatasetReader data(path);
    EvalOptions opt;
    opt.drop_fraction = cfg.eval.drop;
    opt.seed = cfg.eval.seed;
    opt.threads = cfg.threads;
    rows.push_back(one_step_eval(*model, data, opt));
    if (with_references) {
      EvalOptions ref = opt;
      ref.label = path + "#constant0";
      rows.push_back(reference_one_step_eval(ReferenceKind::kConstantZero, data, ref));
      ref.label = path + "#copyprev";
      rows.push_back(reference_one_step_eval(ReferenceKind::kCopyPrevious, data, ref));
    }
  }
  write_metrics_csv(cfg.out_dir + "/metrics.csv", rows);
  std::cout << "wrote " << cfg.out_dir << "/metrics.csv (" << rows.size() << " rows)\n";
  return kExitOk;
}

int cmd_robustness(const RunConfig& cfg) {
  if (cfg.eval_paths.empty()) throw ConfigError("robustness needs data.eval dataset paths");
  write_effective_config(cfg);
  auto model = build_model_from_checkpoint(cfg);
  std::vector<DatasetReader> readers;
  readers.reserve(cfg.eval_paths.size());
  for (const std::string& path : cfg.eval_paths) readers.emplace_back(path);
  std::vector<const DatasetReader*> ptrs;
  for (const DatasetReader& r : readers) ptrs.push_back(&r);
  auto rows = robustness_sweep(*model, ptrs, cfg.eval.fractions, cfg.eval.seed, cfg.threads);
  write_metrics_csv(cfg.out_dir + "/metrics.csv", rows);
  std::cout << "wrote " << cfg.out_dir << "/metrics.csv (" << rows.size() << " rows)\n";
  return kExitOk;
}

int cmd_rollout(const RunConfig& cfg) {
  if (cfg.eval_paths.empty()) throw ConfigError("rollout needs a data.eval dataset path");
  write_effective_config(cfg);
  auto model = build_model_from_checkpoint(cfg);
  DatasetReader data(cfg.eval_paths.front());
  SequenceViews episode = data.load(cfg.eval.rollout_index);
  ForwardRollout driver(*model);
  RolloutConfig rc;
  rc.views = static_cast<int>(data.header().views_per_step);
  rc.seed = cfg.eval.rollout_seed;
  RolloutResult result = rollout(driver, episode, rc);
  char name[64];
  for (const RolloutRecord& rec : result.rollout) {
    std::snprintf(name, sizeof(name), "/rollout_t%03d.pgm", rec.step);
    write_pgm(cfg.out_dir + name, rec.stitched);
  }
  std::cout << "wrote " << result.rollout.size() << " stitched rollout frames under "
            << cfg.out_dir << "\n";
  return kExitOk;
}

int cmd_enclaves(const RunConfig& cfg) {
  write_effective_config(cfg);
  if (cfg.kind != "s2gru")
    throw ConfigError("enclave maps require the s2gru model kind");
  auto model = build_model_from_checkpoint(cfg);
  auto* s2 = dynamic_cast<S2GruModel*>(model.get());
  auto maps = enclave_map(s2->module_embeddings(), s2->config().kernel,
                          s2->config().embedding);
  char name[64];
  for (std::size_t m = 0; m < maps.size(); ++m) {
    std::snprintf(name, sizeof(name), "/enclave_m%zu.pgm", m);
    write_pgm(cfg.out_dir + name, maps[m]);
  }
  std::cout << "wrote " << maps.size() << " enclave maps under " << cfg.out_dir << "\n";
  return kExitOk;
}

int cmd_gradcheck(const RunConfig& cfg) {
  write_effective_config(cfg);
  GradSuiteReport report = run_gradient_suite();
  for (const GradSuiteEntry& e : report.entries)
    std::printf("[%s] %-40s %.3e (tolerance %.0e)\n", e.pass ? "ok" : "FAIL",
                e.name.c_str(), e.error, e.tolerance);
  std::printf("worst primitive %.3e, worst composition %.3e\n", report.worst_primitive,
              report.worst_composition);
  if (!report.pass) {
    std::cout << "gradient suite FAILED\n";
    return kExitCheckFailed;
  }
  std::cout << "gradient suite passed (" << report.entries.size() << " checks)\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spatially structured recurrent modules: data, training, evaluation"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;

  // Per-command convenience flags; they take precedence over the file and
  // --set overrides.
  struct Flags {
    std::uint32_t seqs = 0, val_seqs = 0, ood_seqs = 0, frames = 0, balls = 0, views = 0;
    std::uint64_t seed = 0;
    std::string out, train_path, val_path, ckpt, kind;
    std::vector<std::string> data;
    double drop = 0.0;
    std::uint64_t model_seed = 0;
    std::uint32_t index = 0;
    int threads = 0, epochs = 0, batch = 0;
    bool references = false;
  } flags;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "configuration file (INI sections)");
    cmd->add_option("--set", overrides, "override, e.g. --set train.epochs=10");
    cmd->add_option("--out", flags.out, "output directory");
    cmd->add_option("--threads", flags.threads, "parallelism cap (results are thread-count independent)");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate train/val and OOD datasets");
  gen->add_option("--seqs", flags.seqs, "training sequences");
  gen->add_option("--val-seqs", flags.val_seqs, "validation sequences");
  gen->add_option("--ood-seqs", flags.ood_seqs, "sequences per OOD ball count");
  gen->add_option("--frames", flags.frames, "frames per sequence");
  gen->add_option("--balls", flags.balls, "training ball count");
  gen->add_option("--views", flags.views, "views per step");
  gen->add_option("--seed", flags.seed, "master seed");
  add_common(gen);

  CLI::App* tr = app.add_subcommand("train", "train a model");
  tr->add_option("--train", flags.train_path, "training dataset");
  tr->add_option("--val", flags.val_path, "validation dataset");
  tr->add_option("--kind", flags.kind, "s2gru | baseline-gru | baseline-lstm | tto");
  tr->add_option("--model-seed", flags.model_seed, "parameter initialization seed");
  tr->add_option("--epochs", flags.epochs, "epoch count");
  tr->add_option("--batch", flags.batch, "batch size");
  tr->add_option("--seed", flags.seed, "training seed");
  add_common(tr);

  CLI::App* ev = app.add_subcommand("eval", "one-step metrics over datasets");
  ev->add_option("--ckpt", flags.ckpt, "checkpoint file");
  ev->add_option("--data", flags.data, "dataset files")->delimiter(',');
  ev->add_option("--drop", flags.drop, "fraction of views to drop");
  ev->add_option("--seed", flags.seed, "subsampling seed");
  ev->add_option("--kind", flags.kind, "model kind");
  ev->add_flag("--references", flags.references, "include reference predictor rows");
  add_common(ev);

  CLI::App* rb = app.add_subcommand("robustness", "metrics over drop-fraction grid");
  rb->add_option("--ckpt", flags.ckpt, "checkpoint file");
  rb->add_option("--data", flags.data, "dataset files")->delimiter(',');
  rb->add_option("--seed", flags.seed, "subsampling seed");
  rb->add_option("--kind", flags.kind, "model kind");
  add_common(rb);

  CLI::App* ro = app.add_subcommand("rollout", "closed-loop rollout images");
  ro->add_option("--ckpt", flags.ckpt, "checkpoint file");
  ro->add_option("--data", flags.data, "episode dataset file");
  ro->add_option("--index", flags.index, "episode index");
  ro->add_option("--seed", flags.seed, "query-center seed");
  ro->add_option("--kind", flags.kind, "model kind");
  add_common(ro);

  CLI::App* en = app.add_subcommand("enclaves", "module responsibility maps");
  en->add_option("--ckpt", flags.ckpt, "checkpoint file");
  add_common(en);

  CLI::App* gc = app.add_subcommand("gradcheck", "run the gradient validation suite");
  add_common(gc);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    RunConfig cfg;
    if (!config_path.empty()) cfg = load_config_file(config_path);
    for (const std::string& o : overrides) apply_override(cfg, o);

    // Flags land last.
    if (gen->count("--seqs")) cfg.gen.train_seqs = flags.seqs;
    if (gen->count("--val-seqs")) cfg.gen.val_seqs = flags.val_seqs;
    if (gen->count("--ood-seqs")) cfg.gen.ood_seqs = flags.ood_seqs;
    if (gen->count("--frames")) cfg.gen.frames = flags.frames;
    if (gen->count("--balls")) cfg.gen.balls = flags.balls;
    if (gen->count("--views")) cfg.gen.views = flags.views;
    if (gen->count("--seed")) cfg.gen.seed = flags.seed;
    if (tr->count("--train")) cfg.train_path = flags.train_path;
    if (tr->count("--val")) cfg.val_path = flags.val_path;
    if (tr->count("--epochs")) cfg.train.epochs = flags.epochs;
    if (tr->count("--batch")) cfg.train.batch = flags.batch;
    if (tr->count("--seed")) cfg.train.seed = flags.seed;
    if (tr->count("--model-seed")) cfg.model_seed = flags.model_seed;
    for (CLI::App* cmd : {ev, rb, ro}) {
      if (cmd->count("--ckpt")) cfg.checkpoint = flags.ckpt;
      if (cmd->count("--data")) cfg.eval_paths = flags.data;
      if (cmd->count("--seed")) {
        cfg.eval.seed = flags.seed;
        cfg.eval.rollout_seed = flags.seed;
      }
    }
    if (en->count("--ckpt")) cfg.checkpoint = flags.ckpt;
    if (ev->count("--drop")) cfg.eval.drop = flags.drop;
    if (ro->count("--index")) cfg.eval.rollout_index = flags.index;
    for (CLI::App* cmd : {tr, ev, rb, ro})
      if (cmd->count("--kind")) cfg.kind = flags.kind;
    for (CLI::App* cmd : {gen, tr, ev, rb, ro, en, gc}) {
      if (cmd->count("--out")) cfg.out_dir = flags.out;
      if (cmd->count("--threads")) cfg.threads = flags.threads;
    }

    cfg.validate();

    if (gen->parsed()) return cmd_gen_data(cfg);
    if (tr->parsed()) return cmd_train(cfg);
    if (ev->parsed()) return cmd_eval(cfg, flags.references);
    if (rb->parsed()) return cmd_robustness(cfg);
    if (ro->parsed()) return cmd_rollout(cfg);
    if (en->parsed()) return cmd_enclaves(cfg);
    if (gc->parsed()) return cmd_gradcheck(cfg);
    return kExitConfig;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}
