#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "tal/attacks.hpp"
#include "tal/net.hpp"
#include "tal/zoo.hpp"

// Experiment harness: crafts adversarial examples on a surrogate model,
// evaluates them against victim models, and writes deterministic reports
// (CSV with raw counts, Markdown summary, config echo).

namespace tal {

enum class SuccessMetric { prediction_change, label_mismatch };

inline std::string metric_name(SuccessMetric m) {
  return m == SuccessMetric::prediction_change ? "prediction_change" : "label_mismatch";
}

inline SuccessMetric metric_from_name(const std::string& s) {
  if (s == "prediction_change") return SuccessMetric::prediction_change;
  if (s == "label_mismatch") return SuccessMetric::label_mismatch;
  throw parameter_error("unknown success metric '" + s + "'");
}

struct NamedAttack {
  std::string label;
  AttackConfig cfg;
};

struct ExperimentSpec {
  std::string surrogate_path;
  std::vector<std::string> victim_paths;
  std::vector<NamedAttack> attacks;
  std::string dataset_spec = "synth";
  int n_images = 200;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  SuccessMetric metric = SuccessMetric::prediction_change;
  std::string out_dir = "out";
  int threads = 0;  // 0 -> hardware concurrency
};

inline void validate_spec(const ExperimentSpec& spec) {
  if (spec.surrogate_path.empty()) throw parameter_error("experiment: surrogate path missing");
  if (spec.victim_paths.empty()) throw parameter_error("experiment: at least one victim required");
  if (spec.attacks.empty()) throw parameter_error("experiment: at least one attack required");
  if (spec.seeds.empty()) throw parameter_error("experiment: at least one seed required");
  if (spec.n_images < 1) throw parameter_error("experiment: image count must be at least 1");
  for (const auto& a : spec.attacks) validate_attack_config(a.cfg);
}

struct CellCounts {
  int images = 0;
  int clean_correct = 0;   // victim is right on the clean image
  int pred_change = 0;     // top-1 changed between clean and adversarial
  int label_mismatch = 0;  // clean-correct images pushed off the true label
};

struct ReportRow {
  std::string attack;
  std::string victim;
  bool whitebox = false;
  std::uint64_t seed = 0;
  CellCounts counts;
};

struct TransferReport {
  std::vector<std::string> attack_labels;
  std::vector<std::string> victim_names;
  std::vector<bool> victim_whitebox;
  std::vector<ReportRow> rows;  // attack-major, then victim, then seed
  SuccessMetric metric = SuccessMetric::prediction_change;
  std::string config_echo;
  std::string baseline_label;  // when set, summaries report deltas vs this attack
  std::map<std::string, double> attack_elapsed_seconds;

  double cell_rate(const CellCounts& c, SuccessMetric m) const {
    if (m == SuccessMetric::prediction_change)
      return c.images > 0 ? 100.0 * c.pred_change / c.images : 0.0;
    return c.clean_correct > 0 ? 100.0 * c.label_mismatch / c.clean_correct : 0.0;
  }

  // mean / min / max rate across seeds for one (attack, victim) cell
  struct RateStats {
    double mean = 0.0, min = 0.0, max = 0.0;
    int n = 0;
  };

  RateStats rate(const std::string& attack, const std::string& victim) const {
    RateStats st;
    double sum = 0.0;
    for (const auto& r : rows) {
      if (r.attack != attack || r.victim != victim) continue;
      double v = cell_rate(r.counts, metric);
      if (st.n == 0) {
        st.min = st.max = v;
      } else {
        st.min = std::min(st.min, v);
        st.max = std::max(st.max, v);
      }
      sum += v;
      ++st.n;
    }
    if (st.n > 0) st.mean = sum / st.n;
    return st;
  }

  // mean over black-box victims (all victims when every entry is whitebox)
  double attack_average(const std::string& attack) const {
    double sum = 0.0;
    int n = 0;
    for (std::size_t v = 0; v < victim_names.size(); ++v) {
      if (victim_whitebox[v] && victim_names.size() > 1) continue;
      sum += rate(attack, victim_names[v]).mean;
      ++n;
    }
    return n > 0 ? sum / n : 0.0;
  }
};

// ----------------------------------------------------------- success metric

template <typename T>
CellCounts transfer_counts(const NetworkT<T>& victim, const std::vector<int>& clean_pred,
                           const std::vector<int>& labels, const TensorT<T>& adv) {
  if (adv.dim(0) != static_cast<int>(clean_pred.size()) ||
      clean_pred.size() != labels.size())
    throw parameter_error("transfer_counts: batch size mismatch");
  std::vector<int> adv_pred;
  {
    DatasetT<T> tmp;
    tmp.images = adv;
    tmp.labels = labels;
    tmp.n_classes = victim.n_classes;
    adv_pred = predict_dataset(victim, tmp);
  }
  CellCounts c;
  c.images = adv.dim(0);
  for (std::size_t i = 0; i < clean_pred.size(); ++i) {
    bool correct = clean_pred[i] == labels[i];
    if (correct) ++c.clean_correct;
    if (adv_pred[i] != clean_pred[i]) ++c.pred_change;
    if (correct && adv_pred[i] != labels[i]) ++c.label_mismatch;
  }
  return c;
}

// Percentage of successful transfers of `adv` against `victim`.
//   prediction_change: top-1 differs between clean and adversarial inputs.
//   label_mismatch: among images the victim got right when clean, the
//   fraction pushed off the true label.
template <typename T>
double success_rate(const NetworkT<T>& victim, const DatasetT<T>& clean, const TensorT<T>& adv,
                    SuccessMetric metric) {
  if (clean.size() != adv.dim(0)) throw parameter_error("success_rate: batch size mismatch");
  std::vector<int> clean_pred = predict_dataset(victim, clean);
  CellCounts c = transfer_counts(victim, clean_pred, clean.labels, adv);
  TransferReport r;
  return r.cell_rate(c, metric);
}

// -------------------------------------------------------------- dataset spec

// Dataset spec strings:
//   "synth"                               defaults below
//   "synth:key=value,..."  keys: seed, classes, per, c, hw, split
//   "idx:<images_path>:<labels_path>[:split]"
inline Dataset make_dataset(const std::string& spec) {
  if (spec == "synth" || spec.rfind("synth:", 0) == 0) {
    std::uint64_t seed = 7;
    int classes = 10, per = 300, c = 3, hw = 16;
    Split split = Split::test;
    if (spec.size() > 6) {
      std::stringstream ss(spec.substr(6));
      std::string kv;
      while (std::getline(ss, kv, ',')) {
        auto eq = kv.find('=');
        if (eq == std::string::npos)
          throw parameter_error("dataset spec: expected key=value, found '" + kv + "'");
        std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
        try {
          if (key == "seed") seed = std::stoull(val);
          else if (key == "classes") classes = std::stoi(val);
          else if (key == "per") per = std::stoi(val);
          else if (key == "c") c = std::stoi(val);
          else if (key == "hw") hw = std::stoi(val);
          else if (key == "split") split = split_from_name(val);
          else throw parameter_error("dataset spec: unknown key '" + key + "'");
        } catch (const std::invalid_argument&) {
          throw parameter_error("dataset spec: bad value for '" + key + "'");
        } catch (const std::out_of_range&) {
          throw parameter_error("dataset spec: bad value for '" + key + "'");
        }
      }
    }
    return synth_dataset(seed, classes, per, c, hw, hw, split);
  }
  if (spec.rfind("idx:", 0) == 0) {
    std::string rest = spec.substr(4);
    auto p1 = rest.find(':');
    if (p1 == std::string::npos)
      throw parameter_error("dataset spec: idx needs '<images>:<labels>'");
    std::string images = rest.substr(0, p1);
    std::string labels = rest.substr(p1 + 1);
    Split split = Split::train;
    auto p2 = labels.find(':');
    if (p2 != std::string::npos) {
      split = split_from_name(labels.substr(p2 + 1));
      labels = labels.substr(0, p2);
    }
    return load_idx(images, labels, split);
  }
  throw parameter_error("dataset spec: unrecognized form '" + spec + "'");
}

// ----------------------------------------------------------- config echoing

namespace detail {

inline void echo_scalar(std::ostream& out, double v) { write_scalar(out, v); }

inline void echo_attack(std::ostream& out, const NamedAttack& a) {
  const AttackConfig& c = a.cfg;
  out << "attack " << a.label << " method=" << c.method << " epsilon=";
  echo_scalar(out, c.epsilon);
  out << " alpha=";
  echo_scalar(out, c.resolved_alpha());
  out << " T=" << c.T << " mu=";
  echo_scalar(out, c.mu);
  out << " ti_kernel_size=" << c.ti_kernel_size << " ti_sigma=";
  echo_scalar(out, c.ti_sigma);
  out << " sgm_gamma=";
  echo_scalar(out, c.sgm_gamma);
  out << " M=" << c.meta.M << " n_support=" << c.meta.n_support
      << " n_query=" << c.meta.n_query << " batch=" << c.resolved_batch()
      << " mgs_iterations=" << c.mgs.iterations << " mgs_directions=" << c.mgs.n_directions
      << " mgs_sigma=";
  echo_scalar(out, c.mgs.sigma);
  out << " data_aug=" << c.ablation.data_aug << " model_aug=" << c.ablation.model_aug
      << " optimize_factor=" << c.ablation.optimize_factor
      << " random_alter=" << c.ablation.random_alter
      << " meta_learning=" << c.ablation.meta_learning
      << " mgs_each_iteration=" << c.mgs_each_iteration << '\n';
}

inline std::string echo_spec(const ExperimentSpec& spec) {
  std::ostringstream out;
  out << "surrogate " << spec.surrogate_path << '\n';
  out << "victims";
  for (const auto& v : spec.victim_paths) out << ' ' << v;
  out << '\n';
  out << "dataset " << spec.dataset_spec << '\n';
  out << "images " << spec.n_images << '\n';
  out << "seeds";
  for (auto s : spec.seeds) out << ' ' << s;
  out << '\n';
  out << "metric " << metric_name(spec.metric) << '\n';
  out << "attacks " << spec.attacks.size() << '\n';
  for (const auto& a : spec.attacks) echo_attack(out, a);
  return out.str();
}

inline std::string path_stem(const std::string& path) {
  return std::filesystem::path(path).stem().string();
}

}  // namespace detail

// --------------------------------------------------------------- experiment

// Crafts per seed and attack on the surrogate, evaluates on every victim.
// Images fan out to a worker pool; each image owns an RNG stream derived
// from (seed, image index), so results do not depend on scheduling.
inline TransferReport run_experiment(const ExperimentSpec& spec) {
  validate_spec(spec);
  Network surrogate = load_model(spec.surrogate_path);
  std::vector<Network> victims;
  victims.reserve(spec.victim_paths.size());
  for (const auto& p : spec.victim_paths) victims.push_back(load_model(p));

  Dataset full = make_dataset(spec.dataset_spec);
  validate_dataset(full);
  if (full.size() < spec.n_images)
    throw parameter_error("experiment: dataset has fewer images than requested");
  auto check_shape = [&](const Network& net, const std::string& what) {
    if (net.input_shape.size() != 3 || full.images.dim(1) != net.input_shape[0] ||
        full.images.dim(2) != net.input_shape[1] || full.images.dim(3) != net.input_shape[2] ||
        full.n_classes != net.n_classes)
      throw format_error("experiment: dataset incompatible with " + what);
  };
  check_shape(surrogate, "surrogate");
  for (std::size_t v = 0; v < victims.size(); ++v)
    check_shape(victims[v], "victim " + spec.victim_paths[v]);

  int n = spec.n_images;
  int C = full.images.dim(1), H = full.images.dim(2), W = full.images.dim(3);
  std::size_t img_sz = static_cast<std::size_t>(C) * H * W;

  Dataset clean;
  clean.images = Tensor({n, C, H, W});
  std::copy(full.images.data.begin(),
            full.images.data.begin() + static_cast<std::ptrdiff_t>(img_sz * n),
            clean.images.data.begin());
  clean.labels.assign(full.labels.begin(), full.labels.begin() + n);
  clean.n_classes = full.n_classes;
  clean.split = full.split;

  std::vector<std::vector<int>> clean_pred(victims.size());
  for (std::size_t v = 0; v < victims.size(); ++v)
    clean_pred[v] = predict_dataset(victims[v], clean);

  TransferReport report;
  report.metric = spec.metric;
  report.config_echo = detail::echo_spec(spec);
  for (const auto& a : spec.attacks) report.attack_labels.push_back(a.label);
  for (const auto& p : spec.victim_paths) {
    report.victim_names.push_back(detail::path_stem(p));
    report.victim_whitebox.push_back(p == spec.surrogate_path);
  }

  int n_threads = spec.threads > 0 ? spec.threads
                                   : static_cast<int>(std::thread::hardware_concurrency());
  if (n_threads < 1) n_threads = 1;

  for (const auto& a : spec.attacks) {
    double attack_seconds = 0.0;
    for (std::uint64_t seed : spec.seeds) {
      Tensor adv({n, C, H, W});
      std::vector<double> elapsed(static_cast<std::size_t>(n), 0.0);
      auto craft = [&](int i) {
        Rng rng(mix64(seed, static_cast<std::uint64_t>(i)), 0x4a77);
        Tensor x = clean.image(i);
        AttackResult r = run_attack(surrogate, x, clean.labels[static_cast<std::size_t>(i)],
                                    a.cfg, rng);
        std::copy(r.x_adv.data.begin(), r.x_adv.data.end(),
                  adv.data.begin() + static_cast<std::ptrdiff_t>(img_sz * i));
        elapsed[static_cast<std::size_t>(i)] = r.elapsed_seconds;
      };
      if (n_threads == 1 || n < 2) {
        for (int i = 0; i < n; ++i) craft(i);
      } else {
        std::atomic<int> next{0};
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(n_threads));
        for (int t = 0; t < n_threads; ++t)
          pool.emplace_back([&] {
            for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) craft(i);
          });
        for (auto& th : pool) th.join();
      }
      for (double e : elapsed) attack_seconds += e;

      for (std::size_t v = 0; v < victims.size(); ++v) {
        ReportRow row;
        row.attack = a.label;
        row.victim = report.victim_names[v];
        row.whitebox = report.victim_whitebox[v];
        row.seed = seed;
        row.counts = transfer_counts(victims[v], clean_pred[v], clean.labels, adv);
        report.rows.push_back(std::move(row));
      }
    }
    report.attack_elapsed_seconds[a.label] = attack_seconds;
  }
  return report;
}

// One report per epsilon; step size follows as epsilon / T.
inline std::vector<TransferReport> epsilon_sweep(const ExperimentSpec& spec,
                                                 const std::vector<double>& eps_list) {
  if (eps_list.empty()) throw parameter_error("epsilon_sweep: empty epsilon list");
  std::vector<TransferReport> out;
  out.reserve(eps_list.size());
  for (double eps : eps_list) {
    ExperimentSpec s = spec;
    for (auto& a : s.attacks) {
      a.cfg.epsilon = eps;
      a.cfg.alpha = 0.0;  // re-derive as eps / T
    }
    out.push_back(run_experiment(s));
  }
  return out;
}

// Six-variant study of the composite attack: the full configuration plus
// one run per disabled ingredient; summaries report deltas vs the full row.
inline TransferReport ablation(const ExperimentSpec& spec) {
  const NamedAttack* base = nullptr;
  for (const auto& a : spec.attacks)
    if (a.cfg.method == "llta") base = &a;
  if (!base) throw parameter_error("ablation: no llta attack in the spec");

  ExperimentSpec s = spec;
  s.attacks.clear();
  NamedAttack full = *base;
  full.label = "llta-full";
  s.attacks.push_back(full);
  auto add = [&](const std::string& label, auto&& toggle) {
    NamedAttack v = *base;
    v.label = label;
    toggle(v.cfg.ablation);
    s.attacks.push_back(std::move(v));
  };
  add("llta-no-data-aug", [](AblationFlags& f) { f.data_aug = false; });
  add("llta-no-model-aug", [](AblationFlags& f) { f.model_aug = false; });
  add("llta-no-optimize-factor", [](AblationFlags& f) { f.optimize_factor = false; });
  add("llta-no-random-alter", [](AblationFlags& f) { f.random_alter = false; });
  add("llta-no-meta-learning", [](AblationFlags& f) { f.meta_learning = false; });

  TransferReport report = run_experiment(s);
  report.baseline_label = "llta-full";
  return report;
}

// ------------------------------------------------------------------ reports

namespace detail {

inline std::string fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

}  // namespace detail

// Writes report.csv (raw counts, one row per attack x victim x seed),
// summary.md (mean rates with min-max ranges, per-column maxima in bold),
// and config.txt (the spec echo). Output is byte-stable across reruns.
inline std::vector<std::string> write_report(const TransferReport& report, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw io_error("cannot create directory '" + dir + "'");

  std::vector<std::string> files;

  std::string csv_path = (fs::path(dir) / "report.csv").string();
  {
    std::ofstream out(csv_path, std::ios::binary);
    if (!out) throw io_error("cannot open '" + csv_path + "'");
    out << "attack,victim,whitebox,seed,images,clean_correct,pred_change,label_mismatch\n";
    for (const auto& r : report.rows)
      out << r.attack << ',' << r.victim << ',' << (r.whitebox ? 1 : 0) << ',' << r.seed << ','
          << r.counts.images << ',' << r.counts.clean_correct << ',' << r.counts.pred_change
          << ',' << r.counts.label_mismatch << '\n';
    if (!out) throw io_error("write failure on '" + csv_path + "'");
  }
  files.push_back(csv_path);

  std::string md_path = (fs::path(dir) / "summary.md").string();
  {
    std::ofstream out(md_path, std::ios::binary);
    if (!out) throw io_error("cannot open '" + md_path + "'");
    out << "# Transfer success rates (" << metric_name(report.metric) << ", %)\n\n";

    // per-column maxima over mean rates
    std::vector<double> col_max(report.victim_names.size(), -1.0);
    double avg_max = -1.0;
    for (const auto& a : report.attack_labels) {
      for (std::size_t v = 0; v < report.victim_names.size(); ++v)
        col_max[v] = std::max(col_max[v], report.rate(a, report.victim_names[v]).mean);
      avg_max = std::max(avg_max, report.attack_average(a));
    }

    out << "| attack |";
    for (std::size_t v = 0; v < report.victim_names.size(); ++v)
      out << ' ' << report.victim_names[v] << (report.victim_whitebox[v] ? "\\*" : "") << " |";
    out << " avg |";
    if (!report.baseline_label.empty()) out << " delta |";
    out << '\n';
    out << "| --- |";
    for (std::size_t v = 0; v < report.victim_names.size(); ++v) out << " --- |";
    out << " --- |";
    if (!report.baseline_label.empty()) out << " --- |";
    out << '\n';

    double base_avg = report.baseline_label.empty()
                          ? 0.0
                          : report.attack_average(report.baseline_label);
    for (const auto& a : report.attack_labels) {
      out << "| " << a << " |";
      for (std::size_t v = 0; v < report.victim_names.size(); ++v) {
        auto st = report.rate(a, report.victim_names[v]);
        std::string cell = detail::fixed2(st.mean);
        if (st.n > 1)
          cell += " (" + detail::fixed2(st.min) + "-" + detail::fixed2(st.max) + ")";
        if (st.mean == col_max[v]) cell = "**" + cell + "**";
        out << ' ' << cell << " |";
      }
      double avg = report.attack_average(a);
      std::string avg_cell = detail::fixed2(avg);
      if (avg == avg_max) avg_cell = "**" + avg_cell + "**";
      out << ' ' << avg_cell << " |";
      if (!report.baseline_label.empty()) out << ' ' << detail::fixed2(avg - base_avg) << " |";
      out << '\n';
    }
    out << "\nRates average the per-seed percentages; ranges are min-max across seeds. "
           "\\* marks whitebox (victim = surrogate).\n";
    if (!out) throw io_error("write failure on '" + md_path + "'");
  }
  files.push_back(md_path);

  std::string cfg_path = (fs::path(dir) / "config.txt").string();
  {
    std::ofstream out(cfg_path, std::ios::binary);
    if (!out) throw io_error("cannot open '" + cfg_path + "'");
    out << report.config_echo;
    if (!out) throw io_error("write failure on '" + cfg_path + "'");
  }
  files.push_back(cfg_path);
  return files;
}

}  // namespace tal
