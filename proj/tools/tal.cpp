// Command-line front end: train models, run transfer-attack experiments,
// epsilon sweeps, component ablations, and re-render reports from raw CSV.
//
// A JSON config document (--config) can populate any option; explicit
// command-line flags always win. Epsilon-like values are given on the
// 0-255 pixel scale and normalized internally.
//
// Exit codes: 0 success, 2 configuration error, 3 I/O or format error.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tal/bench.hpp"

namespace {

using nlohmann::json;
using namespace tal;

// ------------------------------------------------------------ option store

struct Options {
  std::map<std::string, std::string> kv;

  bool has(const std::string& key) const { return kv.count(key) > 0; }

  std::string get(const std::string& key, const std::string& fallback) const {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : it->second;
  }

  std::string require(const std::string& key) const {
    auto it = kv.find(key);
    if (it == kv.end()) throw parameter_error("missing required option --" + key);
    return it->second;
  }
};

int parse_int(const std::string& v, const std::string& key) {
  try {
    std::size_t pos = 0;
    int out = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw parameter_error("option --" + key + ": expected an integer, found '" + v + "'");
  }
}

std::uint64_t parse_u64(const std::string& v, const std::string& key) {
  try {
    std::size_t pos = 0;
    unsigned long long out = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return static_cast<std::uint64_t>(out);
  } catch (const std::exception&) {
    throw parameter_error("option --" + key + ": expected an unsigned integer, found '" + v + "'");
  }
}

double parse_double(const std::string& v, const std::string& key) {
  try {
    std::size_t pos = 0;
    double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw parameter_error("option --" + key + ": expected a number, found '" + v + "'");
  }
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw parameter_error("option --" + key + ": expected a boolean, found '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

// epsilon-style values arrive on the 0-255 scale
double pixel_scaled(const std::string& v, const std::string& key) {
  double raw = parse_double(v, key);
  if (!(raw > 0.0) || raw > 255.0)
    throw parameter_error("option --" + key + ": expected a value in (0, 255]");
  return raw / 255.0;
}

// flags that never take a value
const std::set<std::string> kSwitches = {
    "adv-train",       "no-data-aug",     "no-model-aug", "no-optimize-factor",
    "no-random-alter", "no-meta-learning", "mgs-once",    "help"};

Options parse_args(const std::vector<std::string>& args, const std::set<std::string>& allowed) {
  Options opt;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& tok = args[i];
    if (tok.rfind("--", 0) != 0)
      throw parameter_error("unexpected argument '" + tok + "'");
    std::string key = tok.substr(2);
    std::string val;
    auto eq = key.find('=');
    bool has_val = false;
    if (eq != std::string::npos) {
      val = key.substr(eq + 1);
      key = key.substr(0, eq);
      has_val = true;
    }
    if (!allowed.count(key)) throw parameter_error("unknown option --" + key);
    if (!has_val) {
      if (kSwitches.count(key)) {
        val = "true";
      } else {
        if (i + 1 >= args.size())
          throw parameter_error("option --" + key + " needs a value");
        val = args[++i];
      }
    }
    opt.kv[key] = val;
  }
  return opt;
}

// JSON config section -> options; explicit flags override
void merge_config(Options& opt, const std::string& config_path, const std::string& section,
                  const std::set<std::string>& allowed) {
  std::ifstream in(config_path);
  if (!in) throw io_error("cannot open config '" + config_path + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw parameter_error(std::string("config parse failure: ") + e.what());
  }
  if (!doc.contains(section)) return;
  const json& sec = doc[section];
  if (!sec.is_object()) throw parameter_error("config section '" + section + "' must be an object");
  for (auto it = sec.begin(); it != sec.end(); ++it) {
    const std::string& key = it.key();
    if (!allowed.count(key))
      throw parameter_error("config key '" + section + "." + key + "' is not recognized");
    if (opt.has(key)) continue;  // flag wins
    const json& v = it.value();
    if (v.is_string()) {
      opt.kv[key] = v.get<std::string>();
    } else if (v.is_boolean()) {
      opt.kv[key] = v.get<bool>() ? "true" : "false";
    } else if (v.is_number_integer()) {
      opt.kv[key] = std::to_string(v.get<long long>());
    } else if (v.is_number()) {
      std::ostringstream ss;
      ss << v.get<double>();
      opt.kv[key] = ss.str();
    } else if (v.is_array()) {
      std::string joined;
      for (const auto& e : v) {
        if (!joined.empty()) joined += ',';
        if (e.is_string()) joined += e.get<std::string>();
        else joined += e.dump();
      }
      opt.kv[key] = joined;
    } else {
      throw parameter_error("config key '" + section + "." + key + "' has an unsupported type");
    }
  }
}

// ------------------------------------------------------------- subcommands

const std::set<std::string> kTrainKeys = {
    "config", "arch",     "data", "seed",       "adv-train", "adv-eps",     "epochs",
    "batch-size", "lr",   "momentum", "weight-decay", "out",  "help"};

const std::set<std::string> kAttackKeys = {
    "config",   "method",     "surrogate", "victims",   "eps",    "alpha",  "steps",
    "seeds",    "images",     "data",      "metric",    "out",    "threads", "mu",
    "ti-kernel", "ti-sigma",  "sgm-gamma", "support",   "query",  "meta-iters",
    "meta-batch", "mgs-iters", "mgs-dirs", "mgs-sigma", "mgs-once", "no-data-aug",
    "no-model-aug", "no-optimize-factor", "no-random-alter", "no-meta-learning",
    "eps-list", "help"};

const std::set<std::string> kReportKeys = {"config", "csv", "out", "metric", "baseline", "help"};

void print_usage(std::ostream& out) {
  out << "usage: tal <subcommand> [options]\n"
         "\n"
         "subcommands:\n"
         "  train   --arch rs-small|rs-mid|rs-wide --out PATH [--data SPEC] [--seed N]\n"
         "          [--adv-train] [--adv-eps E] [--epochs N] [--batch-size N] [--lr X]\n"
         "          [--momentum X] [--weight-decay X]\n"
         "  attack  --method LIST --surrogate PATH --victims P1,P2 [--eps E] [--steps T]\n"
         "          [--alpha A] [--seeds S1,S2] [--images N] [--data SPEC] [--metric M]\n"
         "          [--out DIR] [--threads N] [method-specific options]\n"
         "  sweep   attack options plus --eps-list E1,E2,...\n"
         "  ablate  attack options (method fixed to llta); writes the component study\n"
         "  report  --csv PATH [--out DIR] [--metric M] [--baseline LABEL]\n"
         "\n"
         "Any option may come from a JSON document via --config FILE (sections\n"
         "\"train\", \"attack\", \"sweep\", \"ablate\", \"report\"; explicit flags win).\n"
         "Epsilon-like values use the 0-255 pixel scale. Dataset specs:\n"
         "  synth[:key=value,...]   keys seed, classes, per, c, hw, split\n"
         "  idx:<images>:<labels>[:split]\n";
}

Options gather(const std::vector<std::string>& args, const std::string& section,
               const std::set<std::string>& allowed) {
  Options opt = parse_args(args, allowed);
  if (opt.has("config")) merge_config(opt, opt.require("config"), section, allowed);
  return opt;
}

int cmd_train(const std::vector<std::string>& args) {
  Options opt = gather(args, "train", kTrainKeys);
  if (opt.has("help")) {
    print_usage(std::cout);
    return 0;
  }
  std::string arch = opt.require("arch");
  std::string out_path = opt.require("out");
  std::uint64_t seed = parse_u64(opt.get("seed", "0"), "seed");
  Dataset data = make_dataset(opt.get("data", "synth:split=train,per=700"));
  validate_dataset(data);

  TrainConfig cfg;
  cfg.seed = seed;
  cfg.epochs = parse_int(opt.get("epochs", std::to_string(cfg.epochs)), "epochs");
  cfg.batch_size = parse_int(opt.get("batch-size", std::to_string(cfg.batch_size)), "batch-size");
  if (opt.has("lr")) cfg.lr = parse_double(opt.kv.at("lr"), "lr");
  if (opt.has("momentum")) cfg.momentum = parse_double(opt.kv.at("momentum"), "momentum");
  if (opt.has("weight-decay"))
    cfg.weight_decay = parse_double(opt.kv.at("weight-decay"), "weight-decay");
  if (opt.has("adv-train")) cfg.adv_train = parse_bool(opt.kv.at("adv-train"), "adv-train");
  if (opt.has("adv-eps")) cfg.adv_epsilon = pixel_scaled(opt.kv.at("adv-eps"), "adv-eps");
  validate_train_config(cfg);

  int C = data.images.dim(1), H = data.images.dim(2), W = data.images.dim(3);
  Network net = make_network<float>(arch, C, H, W, data.n_classes, seed);
  Rng rng(seed, 0x1e11);
  net = train(std::move(net), data, cfg, rng);
  save_model(net, out_path);
  std::cout << "trained " << arch << " (seed " << seed << (cfg.adv_train ? ", adversarial" : "")
            << "), train accuracy " << detail::fixed2(100.0 * accuracy(net, data))
            << "%, saved to " << out_path << "\n";
  return 0;
}

AttackConfig attack_config_from(const Options& opt, const std::string& method) {
  AttackConfig cfg;
  cfg.method = method;
  if (opt.has("eps")) cfg.epsilon = pixel_scaled(opt.kv.at("eps"), "eps");
  if (opt.has("alpha")) cfg.alpha = pixel_scaled(opt.kv.at("alpha"), "alpha");
  if (opt.has("steps")) cfg.T = parse_int(opt.kv.at("steps"), "steps");
  if (opt.has("mu")) cfg.mu = parse_double(opt.kv.at("mu"), "mu");
  if (opt.has("ti-kernel")) cfg.ti_kernel_size = parse_int(opt.kv.at("ti-kernel"), "ti-kernel");
  if (opt.has("ti-sigma")) cfg.ti_sigma = parse_double(opt.kv.at("ti-sigma"), "ti-sigma");
  if (opt.has("sgm-gamma")) cfg.sgm_gamma = parse_double(opt.kv.at("sgm-gamma"), "sgm-gamma");
  if (opt.has("support")) cfg.meta.n_support = parse_int(opt.kv.at("support"), "support");
  if (opt.has("query")) cfg.meta.n_query = parse_int(opt.kv.at("query"), "query");
  if (opt.has("meta-iters")) cfg.meta.M = parse_int(opt.kv.at("meta-iters"), "meta-iters");
  if (opt.has("meta-batch")) cfg.meta.batch = parse_int(opt.kv.at("meta-batch"), "meta-batch");
  if (opt.has("mgs-iters")) cfg.mgs.iterations = parse_int(opt.kv.at("mgs-iters"), "mgs-iters");
  if (opt.has("mgs-dirs")) cfg.mgs.n_directions = parse_int(opt.kv.at("mgs-dirs"), "mgs-dirs");
  if (opt.has("mgs-sigma")) cfg.mgs.sigma = parse_double(opt.kv.at("mgs-sigma"), "mgs-sigma");
  if (opt.has("mgs-once")) cfg.mgs_each_iteration = !parse_bool(opt.kv.at("mgs-once"), "mgs-once");
  if (opt.has("no-data-aug"))
    cfg.ablation.data_aug = !parse_bool(opt.kv.at("no-data-aug"), "no-data-aug");
  if (opt.has("no-model-aug"))
    cfg.ablation.model_aug = !parse_bool(opt.kv.at("no-model-aug"), "no-model-aug");
  if (opt.has("no-optimize-factor"))
    cfg.ablation.optimize_factor = !parse_bool(opt.kv.at("no-optimize-factor"), "no-optimize-factor");
  if (opt.has("no-random-alter"))
    cfg.ablation.random_alter = !parse_bool(opt.kv.at("no-random-alter"), "no-random-alter");
  if (opt.has("no-meta-learning"))
    cfg.ablation.meta_learning = !parse_bool(opt.kv.at("no-meta-learning"), "no-meta-learning");
  return cfg;
}

ExperimentSpec spec_from(const Options& opt, const std::string& default_method) {
  ExperimentSpec spec;
  spec.surrogate_path = opt.require("surrogate");
  spec.victim_paths = split_list(opt.require("victims"));
  spec.dataset_spec = opt.get("data", "synth");
  spec.n_images = parse_int(opt.get("images", "200"), "images");
  spec.out_dir = opt.get("out", "out");
  spec.metric = metric_from_name(opt.get("metric", "prediction_change"));
  spec.threads = parse_int(opt.get("threads", "0"), "threads");
  spec.seeds.clear();
  for (const auto& s : split_list(opt.get("seeds", "0,1,2")))
    spec.seeds.push_back(parse_u64(s, "seeds"));

  for (const auto& m : split_list(opt.get("method", default_method)))
    spec.attacks.push_back({m, attack_config_from(opt, m)});
  return spec;
}

void print_report_summary(const TransferReport& report) {
  for (const auto& a : report.attack_labels)
    std::cout << "  " << a << ": avg " << detail::fixed2(report.attack_average(a)) << "%\n";
}

int cmd_attack(const std::vector<std::string>& args) {
  Options opt = gather(args, "attack", kAttackKeys);
  if (opt.has("help")) {
    print_usage(std::cout);
    return 0;
  }
  ExperimentSpec spec = spec_from(opt, "ifgsm");
  TransferReport report = run_experiment(spec);
  std::vector<std::string> files = write_report(report, spec.out_dir);
  std::cout << "transfer success (" << metric_name(report.metric) << "):\n";
  print_report_summary(report);
  for (const auto& f : files) std::cout << "wrote " << f << "\n";
  return 0;
}

int cmd_sweep(const std::vector<std::string>& args) {
  Options opt = gather(args, "sweep", kAttackKeys);
  if (opt.has("help")) {
    print_usage(std::cout);
    return 0;
  }
  ExperimentSpec spec = spec_from(opt, "ifgsm");
  std::vector<double> eps_list;
  std::vector<std::string> eps_raw = split_list(opt.require("eps-list"));
  for (const auto& e : eps_raw) eps_list.push_back(pixel_scaled(e, "eps-list"));

  std::vector<TransferReport> reports = epsilon_sweep(spec, eps_list);
  for (std::size_t i = 0; i < reports.size(); ++i) {
    std::string dir =
        (std::filesystem::path(spec.out_dir) / ("eps_" + eps_raw[i])).string();
    std::vector<std::string> files = write_report(reports[i], dir);
    std::cout << "eps " << eps_raw[i] << "/255:\n";
    print_report_summary(reports[i]);
    for (const auto& f : files) std::cout << "wrote " << f << "\n";
  }
  return 0;
}

int cmd_ablate(const std::vector<std::string>& args) {
  Options opt = gather(args, "ablate", kAttackKeys);
  if (opt.has("help")) {
    print_usage(std::cout);
    return 0;
  }
  ExperimentSpec spec = spec_from(opt, "llta");
  bool has_llta = false;
  for (const auto& a : spec.attacks) has_llta = has_llta || a.cfg.method == "llta";
  if (!has_llta) throw parameter_error("ablate: the attack list must include llta");
  TransferReport report = ablation(spec);
  std::vector<std::string> files = write_report(report, spec.out_dir);
  std::cout << "component study (" << metric_name(report.metric) << "):\n";
  print_report_summary(report);
  for (const auto& f : files) std::cout << "wrote " << f << "\n";
  return 0;
}

// rebuilds a TransferReport from raw CSV counts
TransferReport report_from_csv(const std::string& path, SuccessMetric metric,
                               const std::string& baseline) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw format_error("csv: empty document");
  if (line != "attack,victim,whitebox,seed,images,clean_correct,pred_change,label_mismatch")
    throw format_error("csv: unrecognized header");

  TransferReport report;
  report.metric = metric;
  report.baseline_label = baseline;
  report.config_echo = "regenerated from " + path + "\n";
  std::map<std::string, bool> seen_victim_whitebox;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 8)
      throw format_error("csv: line " + std::to_string(line_no) + " has " +
                         std::to_string(f.size()) + " fields, expected 8");
    ReportRow row;
    row.attack = f[0];
    row.victim = f[1];
    row.whitebox = parse_bool(f[2] == "1" ? "true" : (f[2] == "0" ? "false" : f[2]), "whitebox");
    row.seed = parse_u64(f[3], "seed");
    row.counts.images = parse_int(f[4], "images");
    row.counts.clean_correct = parse_int(f[5], "clean_correct");
    row.counts.pred_change = parse_int(f[6], "pred_change");
    row.counts.label_mismatch = parse_int(f[7], "label_mismatch");

    if (std::find(report.attack_labels.begin(), report.attack_labels.end(), row.attack) ==
        report.attack_labels.end())
      report.attack_labels.push_back(row.attack);
    if (!seen_victim_whitebox.count(row.victim)) {
      seen_victim_whitebox[row.victim] = row.whitebox;
      report.victim_names.push_back(row.victim);
      report.victim_whitebox.push_back(row.whitebox);
    }
    report.rows.push_back(std::move(row));
  }
  if (report.rows.empty()) throw format_error("csv: no data rows");
  if (!baseline.empty() &&
      std::find(report.attack_labels.begin(), report.attack_labels.end(), baseline) ==
          report.attack_labels.end())
    throw parameter_error("report: baseline '" + baseline + "' not present in the CSV");
  return report;
}

int cmd_report(const std::vector<std::string>& args) {
  Options opt = gather(args, "report", kReportKeys);
  if (opt.has("help")) {
    print_usage(std::cout);
    return 0;
  }
  std::string csv = opt.require("csv");
  SuccessMetric metric = metric_from_name(opt.get("metric", "prediction_change"));
  TransferReport report = report_from_csv(csv, metric, opt.get("baseline", ""));
  std::vector<std::string> files = write_report(report, opt.get("out", "out"));
  std::cout << "transfer success (" << metric_name(report.metric) << "):\n";
  print_report_summary(report);
  for (const auto& f : files) std::cout << "wrote " << f << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  if (args.empty() || args[0] == "--help" || args[0] == "help") {
    print_usage(args.empty() ? std::cerr : std::cout);
    return args.empty() ? 2 : 0;
  }
  std::string sub = args[0];
  std::vector<std::string> rest(args.begin() + 1, args.end());
  try {
    if (sub == "train") return cmd_train(rest);
    if (sub == "attack") return cmd_attack(rest);
    if (sub == "sweep") return cmd_sweep(rest);
    if (sub == "ablate") return cmd_ablate(rest);
    if (sub == "report") return cmd_report(rest);
    std::cerr << "unknown subcommand '" << sub << "'\n";
    print_usage(std::cerr);
    return 2;
  } catch (const parameter_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const dimension_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const io_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 3;
  } catch (const format_error& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
