#include "pastn/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "pastn/data.hpp"
#include "pastn/graph.hpp"
#include "pastn/metrics.hpp"
#include "pastn/rng.hpp"
#include "pastn/spae.hpp"
#include "pastn/training.hpp"

namespace fs = std::filesystem;

namespace pastn::cli {

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

struct LoadedData {
  GraphBundle bundle;
  WindowedDataset dataset;
};

LoadedData load_data(const RunConfig& config) {
  if (config.flow_path.empty() || config.adjacency_path.empty()) {
    throw ConfigError("both --flow and --adj (or config file entries) are required");
  }
  RawSeries raw = load_flow_csv(config.flow_path);
  auto edges = load_edges_csv(config.adjacency_path);
  const double sigma =
      config.adjacency_sigma > 0.0 ? config.adjacency_sigma : default_sigma(edges);
  Tensor adjacency =
      build_adjacency(edges, raw.nodes, sigma, config.adjacency_threshold);
  LoadedData data;
  data.bundle = make_bundle(std::move(adjacency), 10, config.seed);
  data.dataset = featurize_and_window(raw, 12, 12);
  return data;
}

ModelConfig resolve_model_config(const RunConfig& config, std::size_t data_nodes) {
  ModelConfig mc = config.model;
  if (mc.nodes == 0) mc.nodes = data_nodes;
  if (mc.nodes != data_nodes) {
    throw ConfigError("config expects " + std::to_string(mc.nodes) + " nodes but data has " +
                      std::to_string(data_nodes));
  }
  mc.validate();
  return mc;
}

struct TrainedRun {
  TrainResult result;
  MetricsReport val_metrics;
};

TrainedRun run_training(const RunConfig& config, const LoadedData& data, Model& model) {
  TrainOptions opts;
  opts.epochs = config.epochs;
  opts.batch_size = config.batch_size;
  opts.patience = config.patience;
  opts.adam.lr = config.lr;
  opts.seed = config.seed;
  TrainedRun run;
  run.result = train_loop(data.dataset, model, opts);
  run.val_metrics = evaluate_split(data.dataset, model, Split::kVal, config.batch_size);
  return run;
}

// ---- commands -----------------------------------------------------------

int cmd_generate_data(std::size_t nodes, std::size_t days, std::uint64_t seed,
                      const std::string& out_dir) {
  fs::create_directories(out_dir);
  auto edges = random_geometric_edges(nodes, 0.3, seed);
  Tensor adjacency = build_adjacency(edges, nodes, default_sigma(edges), 0.1);
  GraphBundle bundle = make_bundle(std::move(adjacency), 10, seed);
  RawSeries series = generate_synthetic(nodes, days, bundle, seed);
  write_flow_csv((fs::path(out_dir) / "flow.csv").string(), series);
  write_edges_csv((fs::path(out_dir) / "adjacency.csv").string(), edges);
  std::cout << "wrote " << series.steps << " steps x " << nodes << " nodes to " << out_dir
            << " (" << edges.size() << " edges)\n";
  return 0;
}

int cmd_train(const RunConfig& config) {
  fs::create_directories(config.out_dir);
  LoadedData data = load_data(config);
  ModelConfig mc = resolve_model_config(config, data.dataset.nodes);

  RunConfig effective = config;
  effective.model = mc;
  write_text(fs::path(config.out_dir) / "effective_config.json", run_config_to_json(effective));

  Model model(mc, std::move(data.bundle), config.seed);
  std::cout << "model parameters: " << model.parameter_count() << "\n";

  TrainOptions opts;
  opts.epochs = config.epochs;
  opts.batch_size = config.batch_size;
  opts.patience = config.patience;
  opts.adam.lr = config.lr;
  opts.seed = config.seed;
  TrainResult result = train_loop(data.dataset, model, opts);
  for (const EpochLog& e : result.log) {
    std::cout << "epoch " << e.epoch << ": train_loss=" << e.train_loss
              << " val_mae=" << e.val_mae << " (" << e.seconds << "s)\n";
  }

  write_epoch_log_csv((fs::path(config.out_dir) / "epoch_log.csv").string(), result.log);
  model.save_checkpoint((fs::path(config.out_dir) / "checkpoint.bin").string(),
                        data.dataset.scaler.mean, data.dataset.scaler.stddev);
  std::cout << "best val MAE " << fmt(result.best_val_mae) << " at epoch " << result.best_epoch
            << (result.early_stopped ? " (early stop)" : "") << "\n";
  return 0;
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  throw ConfigError("unknown split '" + name + "' (use train|val|test)");
}

int cmd_evaluate(const RunConfig& config, const std::string& checkpoint,
                 const std::string& split_name) {
  fs::create_directories(config.out_dir);
  LoadedData data = load_data(config);
  LoadedModel loaded = Model::load_checkpoint(checkpoint, std::move(data.bundle));
  const Split split = parse_split(split_name);

  MetricsReport report = evaluate_split(data.dataset, loaded.model, split, config.batch_size);
  MetricsReport persistence = evaluate_persistence(data.dataset, split);
  std::vector<HorizonRow> extra = {{"persistence_overall", persistence.overall}};
  write_metrics_csv((fs::path(config.out_dir) / "metrics.csv").string(), report, extra);

  std::cout << "split=" << split_name << " mae=" << fmt(report.overall.mae)
            << " rmse=" << fmt(report.overall.rmse) << " mape=" << fmt(report.overall.mape)
            << "%\n";
  for (const HorizonRow& row : horizon_table(report)) {
    std::cout << row.label << ": mae=" << fmt(row.metrics.mae)
              << " rmse=" << fmt(row.metrics.rmse) << " mape=" << fmt(row.metrics.mape) << "%\n";
  }
  std::cout << "persistence mae=" << fmt(persistence.overall.mae) << " (model/persistence = "
            << fmt(report.overall.mae / persistence.overall.mae) << ")\n";
  return 0;
}

int cmd_ablate(const RunConfig& config) {
  fs::create_directories(config.out_dir);
  LoadedData data = load_data(config);
  ModelConfig base = resolve_model_config(config, data.dataset.nodes);

  const std::vector<std::pair<std::string, AblationFlags>> variants = {
      {"full", {}},
      {"no_spae", {.no_spae = true}},
      {"no_tpam", {.no_tpam = true}},
      {"st_only", {.st_only = true}},
      {"spae_random_init", {.spae_random_init = true}},
      {"spae_frozen", {.spae_frozen = true}},
  };
  std::vector<std::uint64_t> seeds = config.seeds.empty()
                                         ? std::vector<std::uint64_t>{config.seed}
                                         : config.seeds;

  std::string per_seed_csv = "variant,seed,val_mae,val_rmse,val_mape,best_epoch\n";
  std::string summary_csv = "variant,seeds,val_mae_mean,val_rmse_mean,val_mape_mean\n";
  for (const auto& [name, flags] : variants) {
    ModelConfig mc = ablation_variant(base, flags);
    double mae_sum = 0.0, rmse_sum = 0.0, mape_sum = 0.0;
    for (std::uint64_t seed : seeds) {
      RunConfig rc = config;
      rc.seed = seed;
      GraphBundle bundle = make_bundle(data.bundle.adjacency.clone(), base.embed_dim, seed);
      Model model(mc, std::move(bundle), seed);
      TrainedRun run = run_training(rc, data, model);

      const fs::path dir = fs::path(config.out_dir) / name / ("seed" + std::to_string(seed));
      fs::create_directories(dir);
      write_epoch_log_csv((dir / "epoch_log.csv").string(), run.result.log);
      MetricsReport persistence = evaluate_persistence(data.dataset, Split::kVal);
      write_metrics_csv((dir / "metrics.csv").string(), run.val_metrics,
                        {{"persistence_overall", persistence.overall}});
      model.save_checkpoint((dir / "checkpoint.bin").string(), data.dataset.scaler.mean,
                            data.dataset.scaler.stddev);

      per_seed_csv += name + "," + std::to_string(seed) + "," + fmt(run.val_metrics.overall.mae) +
                      "," + fmt(run.val_metrics.overall.rmse) + "," +
                      fmt(run.val_metrics.overall.mape) + "," +
                      std::to_string(run.result.best_epoch) + "\n";
      mae_sum += run.val_metrics.overall.mae;
      rmse_sum += run.val_metrics.overall.rmse;
      mape_sum += run.val_metrics.overall.mape;
      std::cout << name << " seed " << seed << ": val_mae=" << fmt(run.val_metrics.overall.mae)
                << "\n";
    }
    const double k = static_cast<double>(seeds.size());
    summary_csv += name + "," + std::to_string(seeds.size()) + "," + fmt(mae_sum / k) + "," +
                   fmt(rmse_sum / k) + "," + fmt(mape_sum / k) + "\n";
  }
  write_text(fs::path(config.out_dir) / "summary.csv", summary_csv);
  write_text(fs::path(config.out_dir) / "summary_per_seed.csv", per_seed_csv);
  std::cout << "ablation summary written to " << config.out_dir << "/summary.csv\n";
  return 0;
}

void write_dispersion_csv(const fs::path& path, const DispersionResult& d) {
  std::string text = "node,theta\n";
  for (std::size_t i = 0; i < d.angles.size(); ++i) {
    text += std::to_string(d.nodes[i]) + "," + fmt(d.angles[i]) + "\n";
  }
  text += "resultant_length=" + fmt(d.resultant_length) + "\n";
  write_text(path, text);
}

int cmd_diagnose(const RunConfig& config, const std::string& checkpoint, long attn_node) {
  fs::create_directories(config.out_dir);
  LoadedData data = load_data(config);
  LoadedModel loaded = Model::load_checkpoint(checkpoint, std::move(data.bundle));
  const Model& model = loaded.model;

  // One validation window drives the embedding comparison.
  const std::size_t w = data.dataset.split.val_begin;
  Tensor window = data.dataset.window_input(w);
  Tensor x = reshape(window, {1, data.dataset.t_in, data.dataset.nodes, WindowedDataset::kFeatures});

  Tensor hidden = model.input_hidden(x);  // [1, C, N, T0]
  const std::size_t channels = hidden.dim(1), nodes = hidden.dim(2), t0 = hidden.dim(3);
  Tensor without = Tensor::zeros({nodes, channels});
  auto src = hidden.data();
  auto dst = without.data();
  for (std::size_t n = 0; n < nodes; ++n)
    for (std::size_t c = 0; c < channels; ++c) {
      double acc = 0.0;
      for (std::size_t t = 0; t < t0; ++t) acc += src[(c * nodes + n) * t0 + t];
      dst[n * channels + c] = acc / static_cast<double>(t0);
    }
  Tensor with_table = without.clone();
  const bool has_spae = !model.config().ablation.no_spae;
  if (has_spae) {
    auto table = model.params().spae.table.data();
    auto wd = with_table.data();
    for (std::size_t i = 0; i < wd.size(); ++i) wd[i] += table[i];
  } else {
    std::cout << "note: model was trained without SPAE; both diagnostics use the raw hidden "
                 "embeddings\n";
  }

  DispersionResult with_spae = dispersion_score(with_table);
  DispersionResult without_spae = dispersion_score(without);
  write_dispersion_csv(fs::path(config.out_dir) / "dispersion.csv", with_spae);
  write_dispersion_csv(fs::path(config.out_dir) / "dispersion_no_spae.csv", without_spae);
  std::cout << "resultant_length with SPAE table: " << fmt(with_spae.resultant_length) << "\n";
  std::cout << "resultant_length without SPAE table: " << fmt(without_spae.resultant_length)
            << "\n";
  std::cout << "dispersion difference (without - with): "
            << fmt(without_spae.resultant_length - with_spae.resultant_length)
            << (without_spae.resultant_length > with_spae.resultant_length
                    ? " (SPAE disperses the embeddings)"
                    : " (SPAE does not disperse the embeddings here)")
            << "\n";

  if (attn_node >= 0) {
    if (model.config().ablation.no_tpam) {
      std::cout << "note: model has no TPAM; skipping attention dump\n";
    } else if (static_cast<std::size_t>(attn_node) >= nodes) {
      throw IndexError("attention node " + std::to_string(attn_node) + " out of range");
    } else {
      AttentionSink sink;
      sink.capture = true;
      ForwardCtx ctx;
      ctx.attention = &sink;
      (void)model.forward(x, ctx);
      for (std::size_t h = 0; h < sink.heads; ++h) {
        std::string text;
        for (std::size_t i = 0; i < sink.seq_len; ++i) {
          for (std::size_t j = 0; j < sink.seq_len; ++j) {
            if (j) text += ",";
            text += fmt(sink.at(static_cast<std::size_t>(attn_node), h, i, j));
          }
          text += "\n";
        }
        const std::string fname =
            "attention_node" + std::to_string(attn_node) + "_head" + std::to_string(h) + ".csv";
        write_text(fs::path(config.out_dir) / fname, text);
      }
      std::cout << "wrote " << sink.heads << " attention maps (" << sink.seq_len << "x"
                << sink.seq_len << ") for node " << attn_node << "\n";
    }
  }
  return 0;
}

// ---- config JSON ---------------------------------------------------------

nlohmann::json ablation_to_json(const AblationFlags& a) {
  return {{"no_spae", a.no_spae},
          {"no_tpam", a.no_tpam},
          {"spae_frozen", a.spae_frozen},
          {"spae_random_init", a.spae_random_init},
          {"st_only", a.st_only}};
}

}  // namespace

std::string run_config_to_json(const RunConfig& config) {
  nlohmann::json j;
  j["data"] = {{"adjacency", config.adjacency_path},
               {"flow", config.flow_path},
               {"sigma", config.adjacency_sigma},
               {"threshold", config.adjacency_threshold}};
  j["model"] = {{"ablation", ablation_to_json(config.model.ablation)},
                {"channels", config.model.channels},
                {"d_feat", config.model.d_feat},
                {"diffusion_depth", config.model.diffusion_depth},
                {"dropout", config.model.dropout},
                {"embed_dim", config.model.embed_dim},
                {"heads", config.model.heads},
                {"kernel", config.model.kernel},
                {"layers", config.model.layers},
                {"nodes", config.model.nodes},
                {"t_in", config.model.t_in},
                {"t_out", config.model.t_out}};
  j["out_dir"] = config.out_dir;
  j["train"] = {{"batch_size", config.batch_size},
                {"epochs", config.epochs},
                {"lr", config.lr},
                {"patience", config.patience},
                {"seed", config.seed},
                {"seeds", config.seeds}};
  return j.dump(2) + "\n";
}

RunConfig run_config_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  RunConfig c;
  if (j.contains("model")) {
    const auto& m = j.at("model");
    c.model.channels = m.value("channels", c.model.channels);
    c.model.d_feat = m.value("d_feat", c.model.d_feat);
    c.model.diffusion_depth = m.value("diffusion_depth", c.model.diffusion_depth);
    c.model.dropout = m.value("dropout", c.model.dropout);
    c.model.embed_dim = m.value("embed_dim", c.model.embed_dim);
    c.model.heads = m.value("heads", c.model.heads);
    c.model.kernel = m.value("kernel", c.model.kernel);
    c.model.layers = m.value("layers", c.model.layers);
    c.model.nodes = m.value("nodes", c.model.nodes);
    c.model.t_in = m.value("t_in", c.model.t_in);
    c.model.t_out = m.value("t_out", c.model.t_out);
    if (m.contains("ablation")) {
      const auto& a = m.at("ablation");
      c.model.ablation.no_spae = a.value("no_spae", false);
      c.model.ablation.no_tpam = a.value("no_tpam", false);
      c.model.ablation.st_only = a.value("st_only", false);
      c.model.ablation.spae_random_init = a.value("spae_random_init", false);
      c.model.ablation.spae_frozen = a.value("spae_frozen", false);
    }
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    c.flow_path = d.value("flow", std::string());
    c.adjacency_path = d.value("adjacency", std::string());
    c.adjacency_sigma = d.value("sigma", 0.0);
    c.adjacency_threshold = d.value("threshold", 0.1);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    c.batch_size = t.value("batch_size", c.batch_size);
    c.epochs = t.value("epochs", c.epochs);
    c.lr = t.value("lr", c.lr);
    c.patience = t.value("patience", c.patience);
    c.seed = t.value("seed", c.seed);
    c.seeds = t.value("seeds", std::vector<std::uint64_t>{});
  }
  c.out_dir = j.value("out_dir", c.out_dir);
  return c;
}

namespace {

// Shared flag wiring for commands that read data and train/evaluate.
void add_common_options(CLI::App* cmd, RunConfig& config, std::string& config_path) {
  cmd->add_option("--config", config_path, "JSON config file (flags override its values)");
  cmd->add_option("--flow", config.flow_path, "flow CSV path");
  cmd->add_option("--adj", config.adjacency_path, "adjacency CSV path");
  cmd->add_option("--out", config.out_dir, "output directory");
  cmd->add_option("--seed", config.seed, "root random seed");
  cmd->add_option("--epochs", config.epochs, "training epochs");
  cmd->add_option("--batch", config.batch_size, "minibatch size");
  cmd->add_option("--patience", config.patience, "early-stopping patience");
  cmd->add_option("--lr", config.lr, "Adam learning rate");
  cmd->add_option("--layers", config.model.layers, "ST-layer count");
  cmd->add_option("--channels", config.model.channels, "residual channels");
  cmd->add_option("--diffusion-depth", config.model.diffusion_depth, "diffusion depth K");
  cmd->add_option("--heads", config.model.heads, "attention heads");
  cmd->add_flag("--no-spae", config.model.ablation.no_spae, "drop the SPAE table");
  cmd->add_flag("--no-tpam", config.model.ablation.no_tpam, "drop the attention module");
  cmd->add_flag("--st-only", config.model.ablation.st_only, "spatio-temporal backbone only");
  cmd->add_flag("--spae-random-init", config.model.ablation.spae_random_init,
                "random SPAE initialization");
  cmd->add_flag("--spae-frozen", config.model.ablation.spae_frozen, "freeze the SPAE table");
}

// Re-parse after loading the config file so explicit flags win.
RunConfig merge_config(const std::string& config_path, const RunConfig& flag_values,
                       const CLI::App* cmd) {
  if (config_path.empty()) return flag_values;
  RunConfig merged = run_config_from_json(read_text(config_path));
  RunConfig flags = flag_values;
  auto keep = [&](const std::string& name, auto member) {
    if (cmd->count(name) > 0) merged.*member = flags.*member;
  };
  keep("--flow", &RunConfig::flow_path);
  keep("--adj", &RunConfig::adjacency_path);
  keep("--out", &RunConfig::out_dir);
  keep("--seed", &RunConfig::seed);
  keep("--epochs", &RunConfig::epochs);
  keep("--batch", &RunConfig::batch_size);
  keep("--patience", &RunConfig::patience);
  keep("--lr", &RunConfig::lr);
  if (cmd->count("--layers")) merged.model.layers = flags.model.layers;
  if (cmd->count("--channels")) merged.model.channels = flags.model.channels;
  if (cmd->count("--diffusion-depth")) merged.model.diffusion_depth = flags.model.diffusion_depth;
  if (cmd->count("--heads")) merged.model.heads = flags.model.heads;
  if (cmd->count("--no-spae")) merged.model.ablation.no_spae = flags.model.ablation.no_spae;
  if (cmd->count("--no-tpam")) merged.model.ablation.no_tpam = flags.model.ablation.no_tpam;
  if (cmd->count("--st-only")) merged.model.ablation.st_only = flags.model.ablation.st_only;
  if (cmd->count("--spae-random-init"))
    merged.model.ablation.spae_random_init = flags.model.ablation.spae_random_init;
  if (cmd->count("--spae-frozen"))
    merged.model.ablation.spae_frozen = flags.model.ablation.spae_frozen;
  return merged;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"PASTN traffic forecasting"};
  app.require_subcommand(1);

  // generate-data
  std::size_t gen_nodes = 20, gen_days = 30;
  std::uint64_t gen_seed = 1;
  std::string gen_out = ".";
  CLI::App* gen = app.add_subcommand("generate-data", "write a synthetic flow + adjacency pair");
  gen->add_option("--nodes", gen_nodes, "sensor count")->check(CLI::PositiveNumber);
  gen->add_option("--days", gen_days, "days of 5-minute readings")->check(CLI::PositiveNumber);
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--out", gen_out, "output directory");

  // train
  RunConfig train_config;
  std::string train_config_path;
  CLI::App* train = app.add_subcommand("train", "train a model and keep the best checkpoint");
  add_common_options(train, train_config, train_config_path);

  // evaluate
  RunConfig eval_config;
  std::string eval_config_path, eval_checkpoint, eval_split = "test";
  CLI::App* evaluate = app.add_subcommand("evaluate", "metrics for a trained checkpoint");
  add_common_options(evaluate, eval_config, eval_config_path);
  evaluate->add_option("--checkpoint", eval_checkpoint, "checkpoint file")->required();
  evaluate->add_option("--split", eval_split, "train|val|test (default test)");

  // ablate
  RunConfig ablate_config;
  std::string ablate_config_path;
  std::vector<std::uint64_t> ablate_seeds;
  CLI::App* ablate = app.add_subcommand("ablate", "train the six component variants");
  add_common_options(ablate, ablate_config, ablate_config_path);
  ablate->add_option("--seeds", ablate_seeds, "seeds to repeat each variant over");

  // diagnose
  RunConfig diag_config;
  std::string diag_config_path, diag_checkpoint;
  long diag_attn_node = -1;
  CLI::App* diagnose = app.add_subcommand("diagnose", "dispersion and attention diagnostics");
  add_common_options(diagnose, diag_config, diag_config_path);
  diagnose->add_option("--checkpoint", diag_checkpoint, "checkpoint file")->required();
  diagnose->add_option("--attn-node", diag_attn_node,
                       "dump this node's attention maps (one CSV per head)");

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_generate_data(gen_nodes, gen_days, gen_seed, gen_out);
    if (train->parsed()) return cmd_train(merge_config(train_config_path, train_config, train));
    if (evaluate->parsed()) {
      return cmd_evaluate(merge_config(eval_config_path, eval_config, evaluate), eval_checkpoint,
                          eval_split);
    }
    if (ablate->parsed()) {
      RunConfig merged = merge_config(ablate_config_path, ablate_config, ablate);
      if (!ablate_seeds.empty()) merged.seeds = ablate_seeds;
      return cmd_ablate(merged);
    }
    if (diagnose->parsed()) {
      return cmd_diagnose(merge_config(diag_config_path, diag_config, diagnose), diag_checkpoint,
                          diag_attn_node);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace pastn::cli
