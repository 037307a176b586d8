#include "mad/pipeline.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

using namespace mad;
using nlohmann::json;

namespace {

struct StageFailure : std::runtime_error {
  StageFailure(std::string stage, const std::string& what) : std::runtime_error(what), stage(std::move(stage)) {}
  std::string stage;
};

struct Overrides {
  std::string config;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::string arch;
  std::string dataset;
  std::string idx_dir;
  std::string method;
  std::optional<double> p;
  std::optional<std::size_t> n_samples;
  std::optional<int> epochs;
  std::optional<int> ft_epochs;
  std::optional<double> epsilon;
  bool fast = false;
  bool deterministic = false;
};

void add_common(CLI::App* app, Overrides& o) {
  app->add_option("-c,--config", o.config, "JSON experiment config")->check(CLI::ExistingFile);
  app->add_option("-o,--out", o.out_dir, "output directory");
  app->add_option("--seed", o.seed, "experiment seed");
  app->add_option("--arch", o.arch, "mlp2 | convnet4");
  app->add_option("--dataset", o.dataset, "synthetic10 | idx_dir");
  app->add_option("--idx-dir", o.idx_dir, "directory with IDX files");
  app->add_option("--method", o.method, "mad | obd | obs | lwm | random | mad_reverse");
  app->add_option("-p,--prune-ratio", o.p, "percent of weights to remove");
  app->add_option("--n-samples", o.n_samples, "saliency subset size");
  app->add_option("--epochs", o.epochs, "adversarial training epochs");
  app->add_option("--ft-epochs", o.ft_epochs, "fine-tuning epochs");
  app->add_option("--epsilon", o.epsilon, "attack budget for training, saliency and evaluation");
  app->add_flag("--fast", o.fast, "single-step adversarial training");
  app->add_flag("--deterministic", o.deterministic, "disable parallel reductions (always on in this build)");
}

ExperimentConfig resolve(const Overrides& o) {
  json j = json::object();
  if (!o.config.empty()) {
    std::ifstream in(o.config);
    j = json::parse(in);
  }
  if (!o.out_dir.empty()) j["out_dir"] = o.out_dir;
  if (o.seed) j["seed"] = *o.seed;
  if (!o.arch.empty()) j["arch"] = o.arch;
  if (!o.dataset.empty()) j["dataset"]["kind"] = o.dataset;
  if (!o.idx_dir.empty()) j["dataset"]["dir"] = o.idx_dir;
  if (!o.method.empty()) j["saliency"]["method"] = o.method;
  if (o.p) j["prune_ratio"] = *o.p;
  if (o.n_samples) j["saliency"]["n_samples"] = *o.n_samples;
  if (o.epochs) j["train"]["epochs"] = *o.epochs;
  if (o.ft_epochs) j["finetune"]["epochs"] = *o.ft_epochs;
  if (o.fast) j["train"]["fast_mode"] = true;
  ExperimentConfig cfg = config_from_json(j);
  if (o.epsilon) {
    auto rescale = [&](AttackSpec& a) {
      a.step_size *= *o.epsilon / a.epsilon;
      a.epsilon = *o.epsilon;
    };
    rescale(cfg.train.attack);
    rescale(cfg.finetune.attack);
    rescale(cfg.saliency.attack);
    for (auto& a : cfg.eval_attacks) rescale(a);
    cfg.validate();
  }
  return cfg;
}

template <typename F>
auto stage(const std::string& name, F&& f) {
  try {
    return f();
  } catch (const StageFailure&) {
    throw;
  } catch (const std::exception& e) {
    throw StageFailure(name, e.what());
  }
}

void write_json(const json& j, const std::filesystem::path& path) {
  std::ofstream out(path);
  out << j.dump(2) << '\n';
}

void print_metrics(const Metrics& m) {
  std::printf("clean %.1f", percent(m.clean_accuracy));
  for (const auto& r : m.robust) std::printf("  %s %.1f", r.label.c_str(), percent(r.accuracy));
  std::printf("  (n=%zu)\n", m.n_samples);
}

int report(const std::vector<std::string>& runs, const std::string& out_csv) {
  std::vector<std::string> labels;
  std::vector<json> rows;
  for (const auto& dir : runs) {
    std::ifstream in(std::filesystem::path(dir) / "results.json");
    if (!in) throw StageFailure("report", "missing results.json in " + dir);
    json r = json::parse(in);
    if (labels.empty() && r.contains("final")) {
      for (const auto& [k, _] : r["final"]["robust"].items()) labels.push_back(k);
    }
    r["_dir"] = dir;
    rows.push_back(std::move(r));
  }
  std::ostringstream csv;
  csv << "run,status,method,prune_ratio,seed,clean";
  for (const auto& l : labels) csv << ',' << l;
  csv << ",nonzero_weights,first_conv_is_max\n";
  std::printf("%-28s %-11s %5s %4s %6s", "run", "method", "p", "seed", "clean");
  for (const auto& l : labels) std::printf(" %7s", l.c_str());
  std::printf(" %9s\n", "nonzero");
  for (const auto& r : rows) {
    const json& c = r["config"];
    const std::string status = r.value("status", "?");
    const std::string method = c["saliency"]["method"];
    const bool ok = status == "ok";
    csv << r["_dir"].get<std::string>() << ',' << status << ',' << method << ',' << c["prune_ratio"].dump()
        << ',' << c["seed"].dump() << ',' << (ok ? r["final"]["clean"].dump() : "");
    std::printf("%-28s %-11s %5.1f %4s %6s", r["_dir"].get<std::string>().c_str(), method.c_str(),
                c["prune_ratio"].get<double>(), c["seed"].dump().c_str(),
                ok ? r["final"]["clean"].dump().c_str() : status.c_str());
    for (const auto& l : labels) {
      const std::string v = ok && r["final"]["robust"].contains(l) ? r["final"]["robust"][l].dump() : "";
      csv << ',' << v;
      std::printf(" %7s", v.c_str());
    }
    const std::string nz = ok ? r["nonzero_weights"].dump() : "";
    const bool has_profile = r.contains("saliency") && r["saliency"].contains("profile");
    const std::string fc = has_profile ? r["saliency"]["profile"]["first_conv_is_max"].dump() : "";
    csv << ',' << nz << ',' << fc << '\n';
    std::printf(" %9s%s\n", nz.c_str(), fc == "true" ? "  first conv layer has the highest mean saliency" : "");
  }
  if (!out_csv.empty()) {
    std::ofstream out(out_csv);
    out << csv.str();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial saliency pruning of small convnets"};
  app.require_subcommand(1);
  Overrides o;
  std::string model, saliency_csv, out_csv;
  std::vector<std::string> runs;

  auto* train = app.add_subcommand("train", "adversarially train a network");
  auto* sal = app.add_subcommand("saliency", "score every weight of a checkpoint");
  auto* prune = app.add_subcommand("prune", "prune a checkpoint by a saliency CSV");
  auto* finetune = app.add_subcommand("finetune", "adversarially fine-tune a pruned checkpoint");
  auto* eval = app.add_subcommand("eval", "clean and robust accuracy of a checkpoint");
  auto* run = app.add_subcommand("run", "train, score, prune, fine-tune and evaluate");
  auto* rep = app.add_subcommand("report", "tabulate results.json files");
  for (auto* sc : {train, sal, prune, finetune, eval, run}) add_common(sc, o);
  for (auto* sc : {sal, prune, finetune, eval}) {
    sc->add_option("-m,--model", model, "input checkpoint")->required()->check(CLI::ExistingFile);
  }
  prune->add_option("-s,--saliency", saliency_csv, "saliency CSV")->required()->check(CLI::ExistingFile);
  rep->add_option("runs", runs, "run directories")->required();
  rep->add_option("--csv", out_csv, "also write the table as CSV");

  CLI11_PARSE(app, argc, argv);

  try {
    if (rep->parsed()) return report(runs, out_csv);
    const ExperimentConfig cfg = stage("config", [&] { return resolve(o); });
    std::filesystem::create_directories(cfg.out_dir);
    const auto out = cfg.out_dir;

    if (run->parsed()) {
      const ReportBundle b = run_experiment(cfg);
      if (!b.ok) throw StageFailure(b.failed_stage, b.error);
      std::printf("trained    ");
      print_metrics(b.trained);
      std::printf("final      ");
      print_metrics(b.final_metrics);
      std::printf("nonzero weights %zu / %zu\n", b.nonzero_weights, b.d_w);
      return 0;
    }

    const DatasetSplits data = stage("dataset", [&] { return load_dataset(cfg.dataset, cfg.seed); });
    if (train->parsed()) {
      TrainResult r = stage("train", [&] { return stage_train(cfg, data); });
      write_history_csv(r.history, out / "history.csv");
      save_checkpoint({r.net, std::nullopt, nullptr, "trained"}, out / "model_trained.ckpt");
      std::printf("best epoch %d, wrote %s\n", r.best_epoch, (out / "model_trained.ckpt").c_str());
      return 0;
    }

    Checkpoint ckpt = stage("load", [&] { return load_checkpoint(model); });
    if (sal->parsed()) {
      stage("saliency", [&] {
        const SaliencyVector s = stage_saliency(cfg, ckpt.net, data);
        write_saliency_csv(ckpt.net, s, out / "saliency.csv");
        write_profile_csv(saliency_profile(s), out / "profile.csv");
        write_json(s.meta, out / "saliency_meta.json");
        for (const auto& p : saliency_profile(s)) {
          std::printf("layer %zu  mean %.4g  max %.4g  params %zu\n", p.layer_id, p.mean_score, p.max_score,
                      p.param_count);
        }
        return 0;
      });
    } else if (prune->parsed()) {
      stage("prune", [&] {
        const SaliencyVector s = read_saliency_csv(ckpt.net, saliency_csv);
        const PruneMask pm = stage_prune(cfg, s);
        apply_prune(ckpt.net, pm.keep);
        save_checkpoint({ckpt.net, pm.keep, {{"prune_ratio", cfg.prune_ratio}}, "pruned"},
                        out / "model_pruned.ckpt");
        std::printf("pruned %zu of %zu weights\n", pm.pruned_count, pm.keep.size());
        return 0;
      });
    } else if (finetune->parsed()) {
      stage("finetune", [&] {
        if (!ckpt.prune_keep) throw std::runtime_error("checkpoint carries no prune mask");
        TrainResult r = stage_finetune(cfg, ckpt.net, data, *ckpt.prune_keep);
        write_history_csv(r.history, out / "history_finetune.csv");
        save_checkpoint({r.net, ckpt.prune_keep, ckpt.saliency_meta, "finetuned"}, out / "model_finetuned.ckpt");
        std::printf("best epoch %d, nonzero weights %zu\n", r.best_epoch, count_nonzero_weights(r.net));
        return 0;
      });
    } else if (eval->parsed()) {
      stage("eval", [&] {
        const Metrics m = stage_eval(cfg, ckpt.net, data.test);
        write_json(metrics_json(m), out / "eval.json");
        print_metrics(m);
        return 0;
      });
    }
    return 0;
  } catch (const StageFailure& e) {
    std::fprintf(stderr, "error [%s]: %s\n", e.stage.c_str(), e.what());
    return 2;
  }
}
