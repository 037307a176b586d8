#include "mad/pipeline.hpp"

#include "mad/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

namespace mad {

using nlohmann::json;

std::string to_string(SaliencyMethod m) {
  switch (m) {
    case SaliencyMethod::mad: return "mad";
    case SaliencyMethod::obd: return "obd";
    case SaliencyMethod::obs: return "obs";
    case SaliencyMethod::lwm: return "lwm";
    case SaliencyMethod::random: return "random";
    case SaliencyMethod::mad_reverse: return "mad_reverse";
  }
  return "?";
}

SaliencyMethod parse_saliency_method(const std::string& name) {
  for (auto m : {SaliencyMethod::mad, SaliencyMethod::obd, SaliencyMethod::obs, SaliencyMethod::lwm,
                 SaliencyMethod::random, SaliencyMethod::mad_reverse}) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("unknown saliency method '" + name + "'");
}

TrainConfig ExperimentConfig::default_finetune() {
  TrainConfig t;
  t.epochs = 10;
  t.lr_milestones = {{6, 0.1}};
  return t;
}

std::vector<AttackSpec> ExperimentConfig::default_eval_attacks() {
  return {AttackSpec::fgsm(0.1), AttackSpec::pgd(0.1, 30), AttackSpec::cw(0.1, 30)};
}

void ExperimentConfig::validate() const {
  if (!(prune_ratio >= 0 && prune_ratio < 100)) {
    throw ConfigError("prune_ratio must lie in [0, 100)");
  }
  if (saliency.n_samples < 1) throw ConfigError("saliency.n_samples must be >= 1");
  if (dataset.kind != "synthetic10" && dataset.kind != "idx_dir") {
    throw ConfigError("dataset.kind must be synthetic10 or idx_dir");
  }
  if (dataset.kind == "idx_dir" && dataset.dir.empty()) throw ConfigError("dataset.dir is required for idx_dir");
  try {
    train.validate();
    finetune.validate();
    saliency.mask.validate();
    saliency.attack.validate();
    for (const auto& a : eval_attacks) a.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, _] : j.items()) {
    if (!ok.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

json to_json(const AttackSpec& s) {
  return {{"kind", to_string(s.kind)}, {"epsilon", s.epsilon},   {"steps", s.steps},
          {"step_size", s.step_size},  {"restarts", s.restarts}, {"kappa", s.kappa},
          {"random_start", s.random_start}};
}

AttackSpec attack_from_json(const json& j) {
  check_keys(j, {"kind", "epsilon", "steps", "step_size", "restarts", "kappa", "random_start"}, "attack");
  const AttackKind kind = parse_attack_kind(j.value("kind", std::string("pgd")));
  const Real eps = j.value("epsilon", 0.1);
  const int steps = j.value("steps", kind == AttackKind::fgsm ? 1 : 7);
  AttackSpec s = kind == AttackKind::fgsm ? AttackSpec::fgsm(eps)
                 : kind == AttackKind::pgd ? AttackSpec::pgd(eps, steps, j.value("restarts", 1))
                                           : AttackSpec::cw(eps, steps, j.value("kappa", 0.0));
  read(j, "restarts", s.restarts);
  read(j, "step_size", s.step_size);
  read(j, "random_start", s.random_start);
  return s;
}

json to_json(const TrainConfig& t) {
  json ms = json::array();
  for (const auto& m : t.lr_milestones) ms.push_back({m.epoch, m.factor});
  return {{"epochs", t.epochs},
          {"lr", t.lr},
          {"momentum", t.momentum},
          {"weight_decay", t.weight_decay},
          {"lr_milestones", ms},
          {"batch_size", t.batch_size},
          {"attack", to_json(t.attack)},
          {"fast_mode", t.fast_mode},
          {"early_stop_patience", t.early_stop_patience}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig t) {
  check_keys(j, {"epochs", "lr", "momentum", "weight_decay", "lr_milestones", "batch_size", "attack",
                 "fast_mode", "early_stop_patience"},
             "train config");
  read(j, "epochs", t.epochs);
  read(j, "lr", t.lr);
  read(j, "momentum", t.momentum);
  read(j, "weight_decay", t.weight_decay);
  read(j, "batch_size", t.batch_size);
  read(j, "fast_mode", t.fast_mode);
  read(j, "early_stop_patience", t.early_stop_patience);
  if (j.contains("lr_milestones")) {
    t.lr_milestones.clear();
    for (const auto& m : j.at("lr_milestones")) {
      t.lr_milestones.push_back({m.at(0).get<int>(), m.at(1).get<Real>()});
    }
  }
  if (j.contains("attack")) t.attack = attack_from_json(j.at("attack"));
  return t;
}

json to_json(const ExperimentConfig& c) {
  json ds = {{"kind", c.dataset.kind}};
  if (c.dataset.kind == "idx_dir") {
    ds["dir"] = c.dataset.dir.string();
  } else {
    ds["seed"] = c.dataset.synthetic.seed;
    ds["n_train"] = c.dataset.synthetic.n_train;
    ds["n_test"] = c.dataset.synthetic.n_test;
    ds["noise_sigma"] = c.dataset.synthetic.noise_sigma;
    ds["contrast"] = c.dataset.synthetic.contrast;
  }
  json attacks = json::array();
  for (const auto& a : c.eval_attacks) attacks.push_back(to_json(a));
  json out = {
      {"dataset", ds},
      {"arch", to_string(c.arch)},
      {"train", to_json(c.train)},
      {"saliency",
       {{"method", to_string(c.saliency.method)},
        {"n_samples", c.saliency.n_samples},
        {"mask", {{"iterations", c.saliency.mask.iterations}, {"lr", c.saliency.mask.lr},
                  {"beta1", c.saliency.mask.adam_beta1}, {"beta2", c.saliency.mask.adam_beta2},
                  {"eps", c.saliency.mask.adam_eps}}},
        {"attack", to_json(c.saliency.attack)},
        {"adversarial_fisher", c.saliency.adversarial_fisher},
        {"scope", to_string(c.saliency.scope)}}},
      {"prune_ratio", c.prune_ratio},
      {"finetune", to_json(c.finetune)},
      {"eval_attacks", attacks},
      {"seed", c.seed},
      {"out_dir", c.out_dir.string()},
  };
  if (c.init_checkpoint) out["init_checkpoint"] = c.init_checkpoint->string();
  return out;
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  try {
    check_keys(j, {"dataset", "arch", "train", "saliency", "prune_ratio", "finetune", "eval_attacks",
                   "seed", "out_dir", "init_checkpoint"},
               "config");
    if (j.contains("dataset")) {
      const json& d = j.at("dataset");
      check_keys(d, {"kind", "dir", "seed", "n_train", "n_test", "noise_sigma", "contrast"}, "dataset");
      read(d, "kind", c.dataset.kind);
      if (d.contains("dir")) c.dataset.dir = d.at("dir").get<std::string>();
      read(d, "seed", c.dataset.synthetic.seed);
      read(d, "n_train", c.dataset.synthetic.n_train);
      read(d, "n_test", c.dataset.synthetic.n_test);
      read(d, "noise_sigma", c.dataset.synthetic.noise_sigma);
      read(d, "contrast", c.dataset.synthetic.contrast);
    }
    if (j.contains("arch")) c.arch = parse_arch(j.at("arch").get<std::string>());
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"), c.train);
    if (j.contains("finetune")) c.finetune = train_config_from_json(j.at("finetune"), c.finetune);
    if (j.contains("saliency")) {
      const json& s = j.at("saliency");
      check_keys(s, {"method", "n_samples", "mask", "attack", "adversarial_fisher", "scope"}, "saliency");
      if (s.contains("method")) c.saliency.method = parse_saliency_method(s.at("method").get<std::string>());
      read(s, "n_samples", c.saliency.n_samples);
      read(s, "adversarial_fisher", c.saliency.adversarial_fisher);
      if (s.contains("scope")) c.saliency.scope = parse_prune_scope(s.at("scope").get<std::string>());
      if (s.contains("attack")) c.saliency.attack = attack_from_json(s.at("attack"));
      if (s.contains("mask")) {
        const json& m = s.at("mask");
        check_keys(m, {"iterations", "lr", "beta1", "beta2", "eps"}, "saliency.mask");
        read(m, "iterations", c.saliency.mask.iterations);
        read(m, "lr", c.saliency.mask.lr);
        read(m, "beta1", c.saliency.mask.adam_beta1);
        read(m, "beta2", c.saliency.mask.adam_beta2);
        read(m, "eps", c.saliency.mask.adam_eps);
      }
    }
    read(j, "prune_ratio", c.prune_ratio);
    if (j.contains("eval_attacks")) {
      c.eval_attacks.clear();
      for (const auto& a : j.at("eval_attacks")) c.eval_attacks.push_back(attack_from_json(a));
    }
    read(j, "seed", c.seed);
    if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
    if (j.contains("init_checkpoint")) c.init_checkpoint = j.at("init_checkpoint").get<std::string>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  } catch (const PruneError& e) {
    throw ConfigError(e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

DatasetSplits load_dataset(const DatasetSource& source, std::uint64_t) {
  if (source.kind == "idx_dir") return load_idx_dir(source.dir);
  return make_synthetic10(source.synthetic);
}

Dataset saliency_subset(const Dataset& train, std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(train.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(seed, {0x5b5e7}));
  rng.shuffle(idx.begin(), idx.end());
  idx.resize(std::min(n, idx.size()));
  std::sort(idx.begin(), idx.end());
  const Batch b = train.batch(idx);
  Dataset out;
  out.image_shape = train.image_shape;
  out.n_classes = train.n_classes;
  out.pixels.assign(b.x.data().begin(), b.x.data().end());
  out.labels = b.y;
  return out;
}

Real percent(Real fraction) { return std::round(fraction * 1000) / 10; }

json metrics_json(const Metrics& m) {
  json robust = json::object();
  for (const auto& r : m.robust) robust[r.label] = percent(r.accuracy);
  return {{"clean", percent(m.clean_accuracy)}, {"robust", robust}, {"n_samples", m.n_samples}};
}

namespace {

std::uint64_t stage_seed(const ExperimentConfig& cfg, std::uint64_t stage) {
  return derive_seed(cfg.seed, {stage});
}

}  // namespace

TrainResult stage_train(const ExperimentConfig& cfg, const DatasetSplits& data) {
  TrainConfig t = cfg.train;
  t.seed = cfg.seed;
  Network net = make_net(cfg.arch, data.train.image_shape, data.train.n_classes, cfg.seed);
  TrainResult r = t.fast_mode ? fast_adv_train(std::move(net), data.train, t)
                              : adv_train(std::move(net), data.train, t);
  r.net = round_trip(r.net);
  return r;
}

SaliencyVector stage_saliency(const ExperimentConfig& cfg, const Network& net, const DatasetSplits& data) {
  const std::uint64_t seed = stage_seed(cfg, 0x5a1);
  const auto method = cfg.saliency.method;
  if (method == SaliencyMethod::lwm) return lwm_saliency(net);
  if (method == SaliencyMethod::random) return random_saliency(net, seed);
  const Dataset subset = saliency_subset(data.train, cfg.saliency.n_samples, seed);
  if (method == SaliencyMethod::mad || method == SaliencyMethod::mad_reverse) {
    MadConfig m{cfg.saliency.attack, cfg.saliency.mask, seed};
    SaliencyVector s = mad_saliency(net, subset, m);
    s.method = to_string(method);
    return s;
  }
  BaselineConfig b{cfg.saliency.adversarial_fisher, cfg.saliency.attack, seed};
  return method == SaliencyMethod::obd ? obd_saliency(net, subset, b) : obs_saliency(net, subset, b);
}

PruneMask stage_prune(const ExperimentConfig& cfg, const SaliencyVector& s) {
  const PruneOrder order =
      cfg.saliency.method == SaliencyMethod::mad_reverse ? PruneOrder::descending : PruneOrder::ascending;
  return prune_by_saliency(s, cfg.prune_ratio, order, cfg.saliency.scope);
}

TrainResult stage_finetune(const ExperimentConfig& cfg, Network net, const DatasetSplits& data,
                           const std::vector<std::uint8_t>& keep) {
  TrainConfig t = cfg.finetune;
  t.seed = stage_seed(cfg, 0xf7);
  apply_prune(net, keep);
  TrainResult r = adv_train(std::move(net), data.train, t, &keep);
  r.net = round_trip(r.net);
  return r;
}

Metrics stage_eval(const ExperimentConfig& cfg, const Network& net, const Dataset& test) {
  return evaluate(net, test, cfg.eval_attacks, stage_seed(cfg, 0xe0));
}

Network round_trip(const Network& net) {
  Checkpoint c{net, std::nullopt, nullptr, "tmp"};
  return decode_checkpoint(encode_checkpoint(c)).net;
}

namespace {

json profile_json(const SaliencyVector& s, const Network& net) {
  const auto prof = saliency_profile(s);
  json layers = json::array();
  std::size_t argmax = 0;
  for (std::size_t i = 0; i < prof.size(); ++i) {
    layers.push_back({{"layer", prof[i].layer_id},
                      {"kind", s.layers[i].is_conv ? "conv" : "fc"},
                      {"mean_score", prof[i].mean_score},
                      {"max_score", prof[i].max_score},
                      {"param_count", prof[i].param_count}});
    if (prof[i].mean_score > prof[argmax].mean_score) argmax = i;
  }
  const bool first_conv = !prof.empty() && net.param_layers()[argmax].is_conv &&
                          std::none_of(net.param_layers().begin(), net.param_layers().begin() + argmax,
                                       [](const ParamLayer& p) { return p.is_conv; });
  return {{"layers", layers}, {"max_mean_layer", prof.empty() ? 0 : prof[argmax].layer_id},
          {"first_conv_is_max", first_conv}};
}

}  // namespace

ReportBundle run_experiment(const ExperimentConfig& cfg) {
  ReportBundle b;
  std::string stage = "config";
  json& res = b.results;
  res["config"] = to_json(cfg);
  try {
    cfg.validate();
    std::filesystem::create_directories(cfg.out_dir);
    {
      std::ofstream out(cfg.out_dir / "config.json");
      out << to_json(cfg).dump(2) << '\n';
    }
    stage = "dataset";
    const DatasetSplits data = load_dataset(cfg.dataset, cfg.seed);

    stage = "train";
    Network trained = [&] {
      if (cfg.init_checkpoint) {
        Checkpoint c = load_checkpoint(*cfg.init_checkpoint);
        if (c.net.arch() != cfg.arch) throw ConfigError("init checkpoint architecture does not match config");
        res["trained_from"] = cfg.init_checkpoint->filename().string();
        return std::move(c.net);
      }
      TrainResult tr = stage_train(cfg, data);
      write_history_csv(tr.history, cfg.out_dir / "history.csv");
      res["train_best_epoch"] = tr.best_epoch;
      return std::move(tr.net);
    }();
    save_checkpoint({trained, std::nullopt, nullptr, "trained"}, cfg.out_dir / "model_trained.ckpt");

    stage = "eval_trained";
    b.trained = stage_eval(cfg, trained, data.test);
    res["trained"] = metrics_json(b.trained);
    b.d_w = trained.num_weights();
    b.trained_nonzero = count_nonzero_weights(trained);

    Network final_net = trained;
    const std::size_t n_remove = prune_count(cfg.prune_ratio, b.d_w);
    if (n_remove > 0) {
      stage = "saliency";
      const SaliencyVector s = stage_saliency(cfg, trained, data);
      write_saliency_csv(trained, s, cfg.out_dir / "saliency.csv");
      write_profile_csv(saliency_profile(s), cfg.out_dir / "profile.csv");
      {
        std::ofstream out(cfg.out_dir / "saliency_meta.json");
        out << s.meta.dump(2) << '\n';
      }
      json sal = {{"method", s.method}, {"n_samples_averaged", s.n_samples_averaged},
                  {"profile", profile_json(s, trained)}};
      if (s.meta.contains("n_excluded")) sal["n_excluded"] = s.meta["n_excluded"];
      res["saliency"] = sal;

      stage = "prune";
      const PruneMask pm = stage_prune(cfg, s);
      Network pruned = trained;
      apply_prune(pruned, pm.keep);
      json smeta = {{"method", s.method}, {"prune_ratio", cfg.prune_ratio}};
      save_checkpoint({pruned, pm.keep, smeta, "pruned"}, cfg.out_dir / "model_pruned.ckpt");
      res["prune"] = {{"pruned_count", pm.pruned_count}, {"sparsity", pm.sparsity},
                      {"order", to_string(cfg.saliency.method == SaliencyMethod::mad_reverse
                                              ? PruneOrder::descending
                                              : PruneOrder::ascending)},
                      {"scope", to_string(cfg.saliency.scope)}};

      stage = "finetune";
      TrainResult ft = stage_finetune(cfg, pruned, data, pm.keep);
      write_history_csv(ft.history, cfg.out_dir / "history_finetune.csv");
      res["finetune_best_epoch"] = ft.best_epoch;
      final_net = std::move(ft.net);
      save_checkpoint({final_net, pm.keep, smeta, "finetuned"}, cfg.out_dir / "model_finetuned.ckpt");
    }

    stage = "eval";
    b.final_metrics = n_remove > 0 ? stage_eval(cfg, final_net, data.test) : b.trained;
    b.nonzero_weights = count_nonzero_weights(final_net);
    res["final"] = metrics_json(b.final_metrics);
    res["d_w"] = b.d_w;
    res["nonzero_weights"] = b.nonzero_weights;
    res["expected_nonzero"] = b.d_w - n_remove;
    b.ok = true;
    res["status"] = "ok";
  } catch (const std::exception& e) {
    b.ok = false;
    b.failed_stage = stage;
    b.error = e.what();
    res["status"] = "failed";
    res["failed_stage"] = stage;
    res["error"] = e.what();
  }
  try {
    std::filesystem::create_directories(cfg.out_dir);
    std::ofstream out(cfg.out_dir / "results.json");
    out << res.dump(2) << '\n';
    if (b.ok) write_results_csv(b, cfg.out_dir / "results.csv");
  } catch (const std::exception& e) {
    if (b.ok) {
      b.ok = false;
      b.failed_stage = "report";
      b.error = e.what();
    }
  }
  return b;
}

void write_results_csv(const ReportBundle& b, const std::filesystem::path& path) {
  std::ofstream out(path);
  out << "stage,clean";
  for (const auto& r : b.trained.robust) out << ',' << r.label;
  out << ",nonzero_weights\n";
  char buf[32];
  auto row = [&](const char* name, const Metrics& m, std::size_t nz) {
    std::snprintf(buf, sizeof buf, "%.1f", percent(m.clean_accuracy));
    out << name << ',' << buf;
    for (const auto& r : m.robust) {
      std::snprintf(buf, sizeof buf, "%.1f", percent(r.accuracy));
      out << ',' << buf;
    }
    out << ',' << nz << '\n';
  };
  row("trained", b.trained, b.trained_nonzero);
  row("final", b.final_metrics, b.nonzero_weights);
}

}  // namespace mad
