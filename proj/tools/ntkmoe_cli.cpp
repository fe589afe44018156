// ntkmoe: data generation, network training, mixture fitting, evaluation
// and the reproducible experiment sweeps. Results go to stdout or files,
// logs to stderr (verbosity via NTKMOE_LOG_LEVEL).

#include "ntkmoe/ntkmoe.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

using namespace ntkmoe;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct StageError : Error {
  StageError(const std::string& stage, const std::string& what) : Error(stage + ": " + what) {}
};

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw SpecificationError("bad integer list '" + s + "'");
    out.push_back(v);
  }
  if (out.empty()) throw SpecificationError("empty integer list");
  return out;
}

std::pair<double, double> parse_gap(const std::string& s) {
  const auto comma = s.find(',');
  if (comma == std::string::npos) throw SpecificationError("--gap expects a,b");
  return {std::stod(s.substr(0, comma)), std::stod(s.substr(comma + 1))};
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << text;
}

void emit(const json& j, const std::string& path) {
  const std::string text = j.dump(2) + "\n";
  if (path.empty()) {
    std::cout << text;
  } else {
    write_text(path, text);
  }
}

std::string csv_row(std::initializer_list<std::string> cells) {
  std::string line;
  bool first = true;
  for (const auto& c : cells) {
    if (!first) line += ',';
    line += c;
    first = false;
  }
  return line + "\n";
}

std::string num(double v) { return format_double(v); }

json aggregate(const std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  const double sd = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0;
  return {{"mean", mean}, {"std", sd}};
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string kind;
  int n = 200;
  std::uint64_t seed = 0;
  double noise = 0.2;
  std::string gap = "2.5,3.5";
  int dim = 10;
  int outputs = 1;
  std::string teacher_widths = "32,32";
  int classes = 4;
  double separation = 3.0;
  std::string out;
};

void cmd_gen_data(const GenDataArgs& a) {
  if (a.kind == "toy1d") {
    const auto [lo, hi] = parse_gap(a.gap);
    const ToyData d = gen_toy1d_gap(a.n, a.seed, a.noise, lo, hi);
    save_csv(d.train, a.out + "_train.csv");
    save_csv(d.test, a.out + "_test.csv");
  } else if (a.kind == "teacher") {
    const auto widths = parse_int_list(a.teacher_widths);
    save_csv(gen_teacher_regression(a.dim, a.outputs, a.n, widths, a.noise, a.seed), a.out + "_train.csv");
    save_csv(gen_teacher_regression(a.dim, a.outputs, a.n, widths, a.noise, mix_seed(a.seed, 0x7e57)),
             a.out + "_test.csv");
  } else if (a.kind == "clusters") {
    const ClusterData d = gen_cluster_classification(a.classes, a.n, a.separation, a.seed);
    save_csv(d.train, a.out + "_train.csv");
    save_csv(d.test_in, a.out + "_test.csv");
    save_csv(d.test_ood, a.out + "_ood.csv");
  } else {
    throw CLI::ValidationError("--kind", "unknown kind '" + a.kind + "' (toy1d, teacher, clusters)");
  }
}

struct TrainArgs {
  std::string data;
  std::string hidden = "200";
  std::string activation = "tanh";
  std::string loss = "mse";
  std::string optimizer = "sgd";
  double delta = 1e-3;
  double lr = 0.01;
  int epochs = 100;
  int batch = 32;
  std::uint64_t seed = 0;
  std::string out;
};

void cmd_train_dnn(const TrainArgs& a) {
  TrainConfig tc;
  tc.loss = parse_loss(a.loss);
  tc.optimizer = parse_optimizer(a.optimizer);
  tc.l2_delta = a.delta;
  tc.learning_rate = a.lr;
  tc.epochs = a.epochs;
  tc.batch_size = a.batch;
  tc.seed = a.seed;
  tc.validate();
  const LabeledDataset data = load_csv(a.data);
  data.validate(tc.loss == Loss::cross_entropy);
  MlpSpec spec;
  spec.layer_widths.push_back(data.input_dim());
  for (int w : parse_int_list(a.hidden)) spec.layer_widths.push_back(w);
  spec.layer_widths.push_back(data.output_dim());
  spec.activation = parse_activation(a.activation);
  spec.validate();
  TrainReport rep;
  const MlpParams mlp = train_map(init_mlp(spec, a.seed), data, tc, &rep);
  save_mlp(mlp, tc, a.out);
  json j{{"objective", rep.objective}, {"parameters", spec.parameter_count()}, {"epochs", rep.epochs}};
  if (tc.loss == Loss::mse) {
    j["train_rmse"] = rep.train_rmse;
  } else {
    j["train_accuracy"] = rep.train_accuracy;
  }
  emit(j, "");
}

struct FitArgs {
  std::string dnn;
  std::string data;
  std::string calibration_data;
  int experts = 8;
  int pca_subset = 256;
  int pca_dims = 8;
  int neighbors = 2;
  double boundary_frac = 0.25;
  std::string boundary_budget = "16";
  double prune_global = 1.0;
  double prune_expert = 1.0;
  int mll_iters = 100;
  bool no_patch = false;
  std::string partition = "shared";
  int workers = 1;
  std::uint64_t seed = 0;
  std::string out;
};

void cmd_fit_moe(const FitArgs& a) {
  const MlpSnapshot dnn = load_mlp(a.dnn);
  const LabeledDataset data = load_csv(a.data);
  MoeConfig cfg;
  cfg.experts = a.experts;
  cfg.pca_subset = a.pca_subset;
  cfg.pca_dims = a.pca_dims;
  cfg.neighbors = a.neighbors;
  cfg.boundary_fraction = a.boundary_frac;
  if (a.boundary_budget == "all") {
    cfg.boundary_budget = kUnlimitedBudget;
  } else {
    const auto b = parse_int_list(a.boundary_budget);
    if (b.size() != 1) throw SpecificationError("--boundary-budget expects one integer or 'all'");
    cfg.boundary_budget = b.front();
  }
  cfg.prune_global = a.prune_global;
  cfg.prune_expert = a.prune_expert;
  cfg.mll_iterations = a.mll_iters;
  cfg.patch_enabled = !a.no_patch;
  cfg.partition_mode = parse_partition_mode(a.partition);
  cfg.seed = a.seed;
  MoeModel model = fit_moe(dnn.mlp, data, dnn.train_config, cfg, a.workers);
  if (!a.calibration_data.empty()) {
    if (dnn.train_config.loss != Loss::cross_entropy)
      throw SpecificationError("--calibration-data needs a cross-entropy network");
    model.calibration = fit_lambda0(model, load_csv(a.calibration_data));
  }
  snapshot_write(model, a.out);

  json experts = json::array();
  for (const auto& info : model.metadata.experts) {
    experts.push_back({{"group", info.group},
                       {"expert", info.expert},
                       {"members", info.members},
                       {"boundary", info.boundary},
                       {"initial_mll", info.initial_mll},
                       {"final_mll", info.final_mll}});
  }
  json jitters = json::array();
  for (const auto& g : model.groups)
    for (const auto& e : g.experts)
      for (const auto& gp : e.outputs) jitters.push_back(gp.jitter);
  emit({{"experts", experts},
        {"jitters", jitters},
        {"jitter_escalations", model.metadata.jitter_escalations},
        {"timings_ms", model.metadata.timings_ms},
        {"average_expert_size", average_expert_size(data.size(), cfg.experts)},
        {"lambda0", model.calibration.lambda0}},
       "");
}

struct EvalArgs {
  std::string model;
  std::string data;
  std::string metrics = "nll,rmse";
  std::string out;
};

void cmd_eval(const EvalArgs& a) {
  std::vector<std::string> wanted;
  {
    std::stringstream ss(a.metrics);
    std::string m;
    while (std::getline(ss, m, ',')) {
      if (m != "nll" && m != "rmse" && m != "mean_variance" && m != "accuracy" && m != "class_nll" && m != "entropy")
        throw CLI::ValidationError("--metrics", "unknown metric '" + m + "'");
      wanted.push_back(m);
    }
  }
  const MoeModel model = snapshot_read(a.model);
  const LabeledDataset data = load_csv(a.data);
  require_dims(data.input_dim() == model.mlp.spec.input_dim() && data.output_dim() == model.output_dim(),
               "eval: dataset dimensions do not match the model");
  const bool classifier = model.train_config.loss == Loss::cross_entropy;
  json j;
  for (const auto& m : wanted) {
    if (m == "nll" || m == "rmse" || m == "mean_variance") {
      if (classifier && m != "mean_variance") throw SpecificationError("metric '" + m + "' needs a regression model");
      const MetricReport rep = evaluate_regression(model, data);
      if (m == "nll") j["nll"] = rep.nll;
      if (m == "rmse") j["rmse"] = rep.rmse;
      if (m == "mean_variance") j["mean_variance"] = rep.mean_variance;
      j["clamped"] = rep.clamped;
    } else {
      if (!classifier) throw SpecificationError("metric '" + m + "' needs a classifier");
      Matrix probs(data.size(), model.output_dim());
      double correct = 0.0, ent = 0.0;
      for (Index i = 0; i < data.size(); ++i) {
        const CalibratedPrediction p = predict_calibrated(model, data.X.row(i).transpose());
        probs.row(i) = p.probs.transpose();
        Index a1 = 0, a2 = 0;
        p.probs.maxCoeff(&a1);
        data.Y.row(i).maxCoeff(&a2);
        correct += a1 == a2;
        ent += entropy(p.probs);
      }
      if (m == "accuracy") j["accuracy"] = correct / static_cast<double>(data.size());
      if (m == "class_nll") j["class_nll"] = classification_nll(probs, data.Y);
      if (m == "entropy") j["mean_entropy"] = ent / static_cast<double>(data.size());
    }
  }
  emit(j, a.out);
}

// ---------------------------------------------------------------------------
// Experiments. Each writes per-seed CSVs and a summary.json into --out.

struct ExperimentArgs {
  std::string which;
  int seeds = 5;
  int workers = 1;
  std::string out = "results";
};

template <class F>
auto stage(const std::string& name, F&& f) {
  try {
    return f();
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

json experiment_toy(const ExperimentArgs& a, const fs::path& dir) {
  const ToyRecipe r;
  std::vector<ToySeedResult> seeds;
  std::string per_seed = csv_row({"seed", "train_rmse", "gap_mean_var", "dense_mean_var", "dense_max_var", "var_at_8",
                                  "shape_ok", "disc_patch", "disc_no_patch", "nll_full", "nll_pruned", "prune_change"});
  std::string curves = csv_row({"seed", "x", "target", "mean", "var_patch", "var_no_patch", "expert_patch",
                                "expert_no_patch"});
  for (int s = 0; s < a.seeds; ++s) {
    const ToySeedResult t = stage("toy1d seed " + std::to_string(s), [&] { return run_toy_seed(r, s, a.workers); });
    per_seed += csv_row({std::to_string(s), num(t.train_rmse), num(t.gap_mean_var), num(t.dense_mean_var),
                         num(t.dense_max_var), num(t.var_at_end), std::to_string(t.shape_ok), num(t.disc_patch),
                         num(t.disc_no_patch), num(t.nll_full), num(t.nll_pruned), num(t.prune_change)});
    for (const auto& p : t.curve)
      curves += csv_row({std::to_string(s), num(p.x), num(p.target), num(p.mean), num(p.var_patch),
                         num(p.var_no_patch), std::to_string(p.expert_patch), std::to_string(p.expert_no_patch)});
    seeds.push_back(t);
  }
  write_text((dir / "toy1d_seeds.csv").string(), per_seed);
  write_text((dir / "toy1d_curves.csv").string(), curves);
  const ToySummary s = summarize_toy(seeds);
  std::vector<double> rm;
  for (const auto& t : s.seeds) rm.push_back(t.train_rmse);
  const int needed = (4 * a.seeds + 4) / 5;
  return {{"train_rmse", aggregate(rm)},
          {"shape_passes", s.shape_passes},
          {"shape_pass", s.shape_passes >= needed},
          {"median_disc_patch", s.median_disc_patch},
          {"median_disc_no_patch", s.median_disc_no_patch},
          {"disc_ratio", s.disc_ratio},
          {"patch_pass", s.disc_ratio <= 0.7},
          {"median_prune_change", s.median_prune_change},
          {"prune_pass", s.median_prune_change <= 0.10}};
}

json experiment_ablation(const ExperimentArgs& a, const fs::path& dir) {
  const TeacherRecipe r;
  std::string rows = csv_row({"seed", "experts", "nll", "rmse", "mean_variance", "mean_final_mll", "fit_ms"});
  std::map<int, std::vector<double>> by_m;
  int trend = 0;
  for (int s = 0; s < a.seeds; ++s) {
    const auto res = stage("ablation seed " + std::to_string(s), [&] { return run_ablation_seed(r, s, a.workers); });
    for (const auto& row : res) {
      rows += csv_row({std::to_string(s), std::to_string(row.experts), num(row.nll), num(row.rmse),
                       num(row.mean_variance), num(row.mean_final_mll), num(row.fit_ms)});
      by_m[row.experts].push_back(row.nll);
    }
    trend += res.back().nll >= res.front().nll;
  }
  write_text((dir / "ablation.csv").string(), rows);
  json table = json::object();
  for (const auto& [m, v] : by_m) table[std::to_string(m)] = aggregate(v);
  return {{"nll_by_experts", table},
          {"trend_seeds", trend},
          {"trend_pass", trend >= (4 * a.seeds + 4) / 5}};
}

json experiment_approx(const ExperimentArgs& a, const fs::path& dir) {
  std::string rows = csv_row({"seed", "instance", "n", "experts", "identity", "brute", "residual"});
  double worst = 0.0;
  for (int s = 0; s < a.seeds; ++s) {
    for (const auto& row : run_approx_error(100, s)) {
      rows += csv_row({std::to_string(s), std::to_string(row.instance), std::to_string(row.n),
                       std::to_string(row.experts), num(row.identity), num(row.brute), num(row.residual)});
      worst = std::max(worst, row.residual);
    }
  }
  write_text((dir / "approx_error.csv").string(), rows);
  return {{"max_residual", worst}, {"pass", worst <= 1e-10}};
}

json experiment_calibration(const ExperimentArgs& a, const fs::path& dir) {
  const CalibrationRecipe r;
  std::string rows = csv_row({"seed", "lambda0", "valid_nll_fitted", "valid_nll_zero", "argmax_invariant",
                              "mean_entropy_in", "mean_entropy_ood", "mean_var_in", "mean_var_ood"});
  std::string hist = csv_row({"seed", "bin", "in_dist", "ood"});
  int separated = 0;
  bool nll_ok = true, argmax_ok = true;
  for (int s = 0; s < a.seeds; ++s) {
    const auto c = stage("calibration seed " + std::to_string(s), [&] { return run_calibration_seed(r, s, a.workers); });
    rows += csv_row({std::to_string(s), num(c.lambda0), num(c.valid_nll_fitted), num(c.valid_nll_zero),
                     std::to_string(c.argmax_invariant), num(c.mean_entropy_in), num(c.mean_entropy_ood),
                     num(c.mean_var_in), num(c.mean_var_ood)});
    for (int b = 0; b < r.bins; ++b)
      hist += csv_row({std::to_string(s), std::to_string(b), std::to_string(c.hist.in_dist[b]),
                       std::to_string(c.hist.ood[b])});
    separated += c.mean_entropy_ood > c.mean_entropy_in;
    nll_ok = nll_ok && c.valid_nll_fitted <= c.valid_nll_zero;
    argmax_ok = argmax_ok && c.argmax_invariant;
  }
  write_text((dir / "calibration.csv").string(), rows);
  write_text((dir / "entropy_histograms.csv").string(), hist);
  return {{"nll_not_worse", nll_ok},
          {"argmax_invariant", argmax_ok},
          {"ood_separated_seeds", separated},
          {"pass", nll_ok && argmax_ok && separated >= (4 * a.seeds + 4) / 5}};
}

json experiment_timing(const ExperimentArgs& a, const fs::path& dir) {
  const TimingRecipe r;
  std::string rows = csv_row({"seed", "inputs", "moe_median_us", "dropout_median_us", "speedup"});
  std::vector<double> speedups;
  for (int s = 0; s < a.seeds; ++s) {
    const TimingReport t = stage("timing seed " + std::to_string(s), [&] { return run_timing_seed(r, s); });
    rows += csv_row({std::to_string(s), std::to_string(t.inputs), num(t.moe_median_us), num(t.dropout_median_us),
                     num(t.speedup)});
    speedups.push_back(t.speedup);
  }
  write_text((dir / "timing.csv").string(), rows);
  const double med = median_of(speedups);
  return {{"median_speedup", med}, {"speedup", aggregate(speedups)}, {"pass", med >= 5.0}};
}

void cmd_experiment(const ExperimentArgs& a) {
  if (a.seeds < 1) throw CLI::ValidationError("--seeds", "must be >= 1");
  const fs::path dir(a.out);
  fs::create_directories(dir);
  json summary;
  if (a.which == "toy1d") {
    summary = experiment_toy(a, dir);
  } else if (a.which == "ablation") {
    summary = experiment_ablation(a, dir);
  } else if (a.which == "approx-error") {
    summary = experiment_approx(a, dir);
  } else if (a.which == "calibration") {
    summary = experiment_calibration(a, dir);
  } else if (a.which == "timing") {
    summary = experiment_timing(a, dir);
  } else {
    throw CLI::ValidationError("experiment", "unknown experiment '" + a.which + "'");
  }
  summary["experiment"] = a.which;
  summary["seeds"] = a.seeds;
  write_text((dir / "summary.json").string(), summary.dump(2) + "\n");
  emit(summary, "");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixtures of NTK Gaussian-process experts around trained networks"};
  app.require_subcommand(1);

  GenDataArgs gd;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset as CSV");
  gen->add_option("--kind", gd.kind, "toy1d, teacher or clusters")->required();
  gen->add_option("--n", gd.n, "Number of training samples");
  gen->add_option("--seed", gd.seed);
  gen->add_option("--noise", gd.noise, "Target noise standard deviation");
  gen->add_option("--gap", gd.gap, "Removed interval a,b (toy1d)");
  gen->add_option("--dim", gd.dim, "Input dimension (teacher)");
  gen->add_option("--outputs", gd.outputs, "Output dimension (teacher)");
  gen->add_option("--teacher-widths", gd.teacher_widths, "Teacher hidden widths (teacher)");
  gen->add_option("--classes", gd.classes, "Class count (clusters)");
  gen->add_option("--separation", gd.separation, "Neighboring blob distance (clusters)");
  gen->add_option("--out", gd.out, "Output prefix")->required();

  TrainArgs tr;
  auto* train = app.add_subcommand("train-dnn", "Train an MLP on a CSV dataset");
  train->add_option("--data", tr.data)->required();
  train->add_option("--hidden", tr.hidden, "Comma-separated hidden widths");
  train->add_option("--activation", tr.activation, "tanh or relu");
  train->add_option("--loss", tr.loss, "mse or cross_entropy");
  train->add_option("--optimizer", tr.optimizer, "sgd or adam");
  train->add_option("--delta", tr.delta, "L2 regularizer (prior precision)");
  train->add_option("--lr", tr.lr);
  train->add_option("--epochs", tr.epochs);
  train->add_option("--batch", tr.batch);
  train->add_option("--seed", tr.seed);
  train->add_option("--out", tr.out)->required();

  FitArgs fa;
  auto* fit = app.add_subcommand("fit-moe", "Fit the mixture of GP experts around a trained network");
  fit->add_option("--dnn", fa.dnn)->required();
  fit->add_option("--data", fa.data)->required();
  fit->add_option("--calibration-data", fa.calibration_data, "Validation CSV for the temperature constant");
  fit->add_option("--experts", fa.experts);
  fit->add_option("--pca-subset", fa.pca_subset);
  fit->add_option("--pca-dims", fa.pca_dims);
  fit->add_option("--neighbors", fa.neighbors);
  fit->add_option("--boundary-frac", fa.boundary_frac);
  fit->add_option("--boundary-budget", fa.boundary_budget, "Points per neighbor, or 'all'");
  fit->add_option("--prune-global", fa.prune_global);
  fit->add_option("--prune-expert", fa.prune_expert);
  fit->add_option("--mll-iters", fa.mll_iters);
  fit->add_flag("--no-patch", fa.no_patch);
  fit->add_option("--partition", fa.partition, "shared or per_output");
  fit->add_option("--workers", fa.workers);
  fit->add_option("--seed", fa.seed);
  fit->add_option("--out", fa.out)->required();

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Evaluate a fitted mixture on a CSV dataset");
  eval->add_option("--model", ev.model)->required();
  eval->add_option("--data", ev.data)->required();
  eval->add_option("--metrics", ev.metrics, "nll,rmse,mean_variance,accuracy,class_nll,entropy");
  eval->add_option("--out", ev.out, "Write the report here instead of stdout");

  ExperimentArgs ex;
  auto* exp = app.add_subcommand("experiment", "Run an experiment sweep");
  exp->add_option("which", ex.which, "toy1d, ablation, approx-error, calibration or timing")->required();
  exp->add_option("--seeds", ex.seeds);
  exp->add_option("--workers", ex.workers);
  exp->add_option("--out", ex.out, "Output directory");

  try {
    app.parse(argc, argv);
    if (*gen) cmd_gen_data(gd);
    if (*train) cmd_train_dnn(tr);
    if (*fit) cmd_fit_moe(fa);
    if (*eval) cmd_eval(ev);
    if (*exp) cmd_experiment(ex);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
