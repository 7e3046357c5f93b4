// Copyright 2026 The meshformer Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "meshformer/meshformer.hpp"

namespace mf = meshformer;
using nlohmann::json;

namespace {

constexpr int kExitError = 1;
constexpr int kExitOracle = 3;

struct Options {
  std::string config;
  std::vector<std::string> bundles;
  std::optional<std::size_t> devices;
  std::optional<std::size_t> tokens;
  double ratio = 0.0;
  double loss_pair = 0.0;
  double loss_rx = 0.0;
  double loss_tx = 0.0;
  std::uint64_t seed = 0;
  std::string out = "-";
  bool oracle_check = false;
  std::string trace;
  std::string input;
  std::string tensor_out;
  std::string devices_list = "1,2,4,8,16";
  std::string ratios = "0:0.9:0.1";
  std::string tokens_list = "1,2,4,8,16,32,64,128,256,512,1024,2048,4096";
  std::string losses = "0:10:2";
  std::string loss_mode = "pair";
  std::size_t trials = 10;
  std::size_t max_features = 1 << 14;
};

// Accepts "a,b,c" or "start:stop:step" (inclusive stop).
std::vector<double> parse_list(const std::string& text, const char* what) {
  auto bad = [&] {
    return mf::ConfigError(std::string("malformed ") + what + " '" + text + "'");
  };
  auto number = [&](const std::string& s) {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      throw bad();
    }
    if (used != s.size() || !std::isfinite(v)) throw bad();
    return v;
  };
  std::vector<double> out;
  if (text.find(':') != std::string::npos) {
    std::vector<std::string> parts;
    std::stringstream ss(text);
    for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
    if (parts.size() != 3) throw bad();
    const double a = number(parts[0]), b = number(parts[1]), step = number(parts[2]);
    if (!(step > 0) || b < a) throw bad();
    const auto count = static_cast<std::size_t>(std::floor((b - a) / step + 1e-9));
    for (std::size_t k = 0; k <= count; ++k)
      out.push_back(a + static_cast<double>(k) * step);
  } else {
    std::stringstream ss(text);
    for (std::string p; std::getline(ss, p, ',');) out.push_back(number(p));
  }
  if (out.empty()) throw bad();
  return out;
}

std::vector<std::size_t> parse_counts(const std::string& text, const char* what) {
  std::vector<std::size_t> out;
  for (double v : parse_list(text, what)) {
    if (v < 1 || v != std::floor(v)) {
      throw mf::ConfigError(std::string("malformed ") + what + " '" + text +
                            "': entries must be positive integers");
    }
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw mf::Error("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw mf::ConfigError("'" + path + "': " + e.what());
  }
}

struct Setup {
  mf::TransformerConfig config;
  mf::DeviceBudget budget;
  mf::LatencyParams latency;
};

// Config file keys: TransformerConfig fields, plus optional "budget" and
// "latency" objects. Flags override.
Setup load_setup(const Options& o) {
  Setup s;
  if (!o.config.empty()) {
    const json j = read_json_file(o.config);
    try {
      s.config = j.get<mf::TransformerConfig>();
      if (j.contains("budget")) s.budget = j.at("budget").get<mf::DeviceBudget>();
      if (j.contains("latency")) s.latency = j.at("latency").get<mf::LatencyParams>();
    } catch (const json::exception& e) {
      throw mf::ConfigError("'" + o.config + "': " + e.what());
    }
  } else if (!o.bundles.empty()) {
    s.config = mf::load_bundle(o.bundles.front()).config;
  }
  if (o.devices) s.config.devices = *o.devices;
  if (o.tokens) s.config.tokens = *o.tokens;
  return s;
}

void emit(const std::string& path, const std::function<void(std::ostream&)>& body) {
  if (path.empty() || path == "-") {
    body(std::cout);
    std::cout.flush();
  } else {
    mf::write_file_atomic(path, body);
  }
}

void check_ratio(double r) {
  if (!(r >= 0.0 && r < 1.0)) throw mf::ConfigError("--ratio must lie in [0, 1)");
}

mf::LossModel loss_from(const Options& o) {
  mf::LossModel l{o.loss_pair, o.loss_rx, o.loss_tx, o.seed};
  l.validate();
  return l;
}

bool lossless(const mf::LossModel& l) {
  return l.p_pair == 0 && l.p_rx_blackout == 0 && l.p_tx_blackout == 0;
}

// Loads the bundle, re-partitions it when --devices differs, and prunes it
// when --ratio is set.
mf::ModelBundle prepare_bundle(const std::string& path, const Options& o) {
  mf::ModelBundle b = mf::load_bundle(path);
  if (o.devices && *o.devices != b.config.devices) {
    if (b.prune) {
      throw mf::ConfigError("bundle '" + path + "' carries masks for D=" +
                            std::to_string(b.config.devices) +
                            "; it cannot be re-partitioned to D=" +
                            std::to_string(*o.devices));
    }
    b.config.devices = *o.devices;
  }
  b.config.validate();
  check_ratio(o.ratio);
  if (o.ratio > 0) b = mf::prune_bundle(std::move(b), o.ratio);
  return b;
}

mf::Matrix gaussian_input(const mf::TransformerConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  mf::Matrix x(c.tokens, c.features);
  for (std::size_t i = 0; i < c.tokens; ++i)
    for (std::size_t j = 0; j < c.features; ++j) x(i, j) = n(rng);
  return x;
}

mf::Matrix read_matrix_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw mf::Error("cannot open '" + path + "'");
  std::vector<float> data;
  std::size_t rows = 0, cols = 0;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::size_t n = 0;
    for (std::string cell; std::getline(ss, cell, ',');) {
      try {
        data.push_back(std::stof(cell));
      } catch (const std::exception&) {
        throw mf::ConfigError("'" + path + "': bad number '" + cell + "'");
      }
      ++n;
    }
    if (rows == 0) cols = n;
    if (n != cols) throw mf::ShapeError("'" + path + "': ragged rows");
    ++rows;
  }
  return mf::Matrix(rows, cols, std::move(data));
}

void write_matrix_csv(std::ostream& os, const mf::Matrix& m) {
  os << std::setprecision(9);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) os << (j ? "," : "") << m(i, j);
    os << '\n';
  }
}

double max_abs_dev(const mf::Matrix& a, const mf::Matrix& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      m = std::max(m, std::abs(static_cast<double>(a(i, j)) - b(i, j)));
  return m;
}

double mean_sq_dev(const mf::Matrix& a, const mf::Matrix& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) {
      const double d = static_cast<double>(a(i, j)) - b(i, j);
      s += d * d;
    }
  return s / static_cast<double>(a.rows() * a.cols());
}

json partition_json(const mf::Partition& p) {
  json devs = json::array();
  for (std::size_t d = 0; d < p.devices; ++d) {
    const auto [c0, c1] = p.col_range(d);
    const auto [h0, h1] = p.hidden_range(d);
    devs.push_back({{"device", d},
                    {"heads", p.head_map[d]},
                    {"feature_columns", {c0, c1}},
                    {"hidden_columns", {h0, h1}}});
  }
  return {{"devices", p.devices},
          {"cols_per_device", p.cols_per_device},
          {"hidden_per_device", p.hidden_per_device},
          {"heads_per_device", p.heads_per_device},
          {"head_dim", p.head_dim},
          {"head_map", p.head_map},
          {"assignment", devs}};
}

// ------------------------------------------------------------------ commands

int cmd_plan(const Options& o) {
  Setup s = load_setup(o);
  s.config.validate();
  check_ratio(o.ratio);
  const mf::Partition p = mf::build_partition(s.config);
  json report;
  std::optional<mf::PruneSpec> masks;
  if (!o.bundles.empty()) {
    const mf::ModelBundle b = prepare_bundle(o.bundles.front(), o);
    if (b.prune) masks = *b.prune;
  }
  if (masks) {
    report = mf::to_json(mf::resource_report(s.config, *masks));
    report["source"] = "masks";
  } else {
    json devs = json::array();
    const double flash = mf::flash_per_device(s.config, o.ratio);
    const double ram = mf::ram_per_device(s.config, o.ratio);
    const std::size_t comm = mf::comm_per_inference(s.config, o.ratio);
    for (std::size_t d = 0; d < s.config.devices; ++d)
      devs.push_back({{"device", d},
                      {"flash_bytes", flash},
                      {"ram_bytes", ram},
                      {"comm_bytes", comm / s.config.devices}});
    report = {{"devices", devs},
              {"max_flash_bytes", flash},
              {"max_ram_bytes", ram},
              {"total_comm_bytes", comm},
              {"source", "ratio"}};
  }
  const double max_flash = report["max_flash_bytes"].get<double>();
  const double max_ram = report["max_ram_bytes"].get<double>();
  const json out = {
      {"config", s.config},
      {"ratio", o.ratio},
      {"partition", partition_json(p)},
      {"resources", report},
      {"budget", s.budget},
      {"fits",
       {{"flash", max_flash <= static_cast<double>(s.budget.usable_flash())},
        {"ram", max_ram <= static_cast<double>(s.budget.usable_ram())}}}};
  emit(o.out, [&](std::ostream& os) { os << out.dump(2) << '\n'; });
  return 0;
}

int cmd_simulate(const Options& o) {
  if (o.bundles.size() != 1) throw mf::ConfigError("simulate needs one --bundle");
  const mf::ModelBundle b = prepare_bundle(o.bundles.front(), o);
  const mf::Matrix x =
      o.input.empty() ? gaussian_input(b.config, o.seed) : read_matrix_csv(o.input);
  mf::ExecOptions opt;
  opt.loss = loss_from(o);
  const mf::ExecReport r = mf::run_inference(b, x, opt);

  if (!o.trace.empty()) {
    emit(o.trace, [&](std::ostream& os) {
      for (const auto& t : r.traces) os << mf::to_json(t).dump() << '\n';
    });
  }
  if (!o.tensor_out.empty())
    emit(o.tensor_out, [&](std::ostream& os) { write_matrix_csv(os, r.output); });

  json report = mf::to_json(r);
  report["config"] = b.config;
  report["seed"] = o.seed;
  report["loss"] = {{"p_pair", opt.loss.p_pair},
                    {"p_rx_blackout", opt.loss.p_rx_blackout},
                    {"p_tx_blackout", opt.loss.p_tx_blackout}};
  int rc = 0;
  if (o.oracle_check) {
    const mf::Matrix ref =
        mf::forward_virtual_devices(b, mf::build_partition(b.config), x);
    const double dev = max_abs_dev(r.output, ref);
    report["oracle_max_dev"] = dev;
    std::ostringstream line;
    line << "max_dev=" << std::setprecision(9) << dev;
    (o.out == "-" || o.out.empty() ? std::cerr : std::cout) << line.str() << '\n';
    if (lossless(opt.loss) && dev != 0.0) {
      std::cerr << "error: lossless run deviates from the reference\n";
      rc = kExitOracle;
    }
  }
  emit(o.out, [&](std::ostream& os) { os << report.dump(2) << '\n'; });
  return rc;
}

int cmd_sweep_feasibility(const Options& o) {
  Setup s = load_setup(o);
  s.config.validate();
  check_ratio(o.ratio);
  const std::vector<std::size_t> tokens = parse_counts(o.tokens_list, "--tokens-list");
  const auto pts =
      mf::feasibility_boundary(s.budget, s.config, o.ratio, tokens, o.max_features);
  emit(o.out, [&](std::ostream& os) { mf::write_boundary_csv(os, pts); });
  return 0;
}

int cmd_sweep_latency(const Options& o) {
  Setup s = load_setup(o);
  s.config.validate_model();
  s.latency.validate();
  const auto devices = parse_counts(o.devices_list, "--devices-list");
  const auto ratios = parse_list(o.ratios, "--ratios");
  for (double r : ratios) check_ratio(r);
  std::ostringstream csv;
  csv << "D,ratio,block,compute_s,comm_s,total_s,speedup\n" << std::setprecision(9);
  for (std::size_t d : devices) {
    mf::TransformerConfig at = s.config;
    at.devices = d;
    at.validate();
    for (double r : ratios)
      for (mf::Block b : {mf::Block::kAttention, mf::Block::kResidual, mf::Block::kLayer}) {
        const double comp = mf::compute_latency(s.config, d, r, b, s.latency);
        const double comm = mf::comm_latency(s.config, d, r, b, s.latency);
        csv << d << ',' << r << ',' << mf::to_string(b) << ',' << comp << ','
            << comm << ',' << comp + comm << ','
            << mf::speedup(s.config, d, r, b, s.latency) << '\n';
      }
  }
  emit(o.out, [&](std::ostream& os) { os << csv.str(); });
  return 0;
}

// Mean squared deviation of lossy outputs from the lossless output, averaged
// over `trials` loss seeds and inputs.
int cmd_sweep_robustness(const Options& o) {
  if (o.bundles.empty()) throw mf::ConfigError("sweep-robustness needs --bundle");
  if (o.trials == 0) throw mf::ConfigError("--trials must be >= 1");
  if (o.loss_mode != "pair" && o.loss_mode != "rx" && o.loss_mode != "tx")
    throw mf::ConfigError("--loss-mode must be pair|rx|tx");
  const auto losses = parse_list(o.losses, "--losses");
  for (double l : losses)
    if (!(l >= 0 && l <= 100)) throw mf::ConfigError("--losses entries must lie in [0, 100]");

  std::vector<std::string> names;
  std::vector<std::vector<double>> columns;
  for (const auto& path : o.bundles) {
    const mf::ModelBundle b = prepare_bundle(path, o);
    std::vector<mf::Matrix> inputs, clean;
    for (std::size_t t = 0; t < o.trials; ++t) {
      inputs.push_back(gaussian_input(b.config, o.seed * 1000003u + t));
      clean.push_back(mf::run_inference(b, inputs.back()).output);
    }
    std::vector<double> col;
    for (double pct : losses) {
      double sum = 0;
      for (std::size_t t = 0; t < o.trials; ++t) {
        mf::ExecOptions opt;
        opt.loss.seed = o.seed * 1000003u + t;
        const double p = pct / 100.0;
        (o.loss_mode == "pair" ? opt.loss.p_pair
         : o.loss_mode == "rx" ? opt.loss.p_rx_blackout
                               : opt.loss.p_tx_blackout) = p;
        sum += mean_sq_dev(mf::run_inference(b, inputs[t], opt).output, clean[t]);
      }
      col.push_back(sum / static_cast<double>(o.trials));
    }
    std::string name = std::filesystem::path(path).stem().string();
    for (char& ch : name)
      if (ch == ',') ch = '_';
    names.push_back(name);
    columns.push_back(std::move(col));
  }
  emit(o.out, [&](std::ostream& os) {
    os << "loss_pct";
    for (const auto& n : names) os << ',' << n;
    os << '\n' << std::setprecision(9);
    for (std::size_t k = 0; k < losses.size(); ++k) {
      os << losses[k];
      for (const auto& c : columns) os << ',' << c[k];
      os << '\n';
    }
  });
  return 0;
}

json masks_json(const mf::PruneSpec& p) {
  json layers = json::array();
  for (std::size_t i = 0; i < p.layers(); ++i) {
    json sites = json::array();
    for (std::size_t s = 0; s < p.sites(); ++s) {
      json devs = json::array();
      for (std::size_t d = 0; d < p.devices(); ++d) {
        const auto& m = p.mask(i, s, d);
        std::string bits;
        for (auto v : m) bits += v ? '1' : '0';
        devs.push_back(bits);
      }
      sites.push_back(devs);
    }
    layers.push_back(sites);
  }
  return layers;
}

int cmd_dump_bundle(const Options& o) {
  if (o.bundles.size() != 1) throw mf::ConfigError("dump-bundle needs one --bundle");
  const mf::ModelBundle b = mf::load_bundle(o.bundles.front());
  json layers = json::array();
  for (const auto& l : b.layers) {
    json mlp = json::array();
    for (const auto& w : l.mlp) mlp.push_back({w.rows(), w.cols()});
    layers.push_back({{"wq", {l.wq.rows(), l.wq.cols()}},
                      {"wo", {l.wo.rows(), l.wo.cols()}},
                      {"mlp", mlp}});
  }
  json out = {{"config", b.config},
              {"metadata", b.metadata},
              {"layer_shapes", layers},
              {"has_masks", b.prune.has_value()}};
  if (b.prune) {
    out["masks"] = masks_json(*b.prune);
    std::size_t kept = 0, total = 0;
    for (std::size_t i = 0; i < b.prune->layers(); ++i)
      for (std::size_t s = 0; s < b.prune->sites(); ++s)
        for (std::size_t d = 0; d < b.prune->devices(); ++d)
          for (auto v : b.prune->mask(i, s, d)) kept += v != 0, ++total;
    out["kept_fraction"] = total ? static_cast<double>(kept) / total : 1.0;
  }
  emit(o.out, [&](std::ostream& os) { os << out.dump(2) << '\n'; });
  return 0;
}

int cmd_gen_bundle(const Options& o) {
  if (o.out.empty() || o.out == "-") throw mf::ConfigError("gen-bundle needs --out");
  Setup s = load_setup(o);
  s.config.validate();
  check_ratio(o.ratio);
  mf::ModelBundle b = mf::random_bundle(s.config, o.seed);
  if (o.ratio > 0) b = mf::prune_bundle(std::move(b), o.ratio);
  b.metadata["generator"] = "meshformer gen-bundle";
  b.metadata["seed"] = std::to_string(o.seed);
  mf::save_bundle(b, o.out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"meshformer: distributed transformer inference simulator"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* c) {
    c->add_option("--config", o.config, "TransformerConfig JSON file")
        ->check(CLI::ExistingFile);
    c->add_option("--devices", o.devices, "device count D (overrides config)");
    c->add_option("--tokens", o.tokens, "token count N (overrides config)");
    c->add_option("--seed", o.seed, "seed for all randomness")->capture_default_str();
    c->add_option("--out", o.out, "output path, '-' for stdout")->capture_default_str();
  };
  auto ratio = [&](CLI::App* c) {
    c->add_option("--ratio", o.ratio, "pruning ratio in [0, 1)")->capture_default_str();
  };
  auto bundle = [&](CLI::App* c, bool many) {
    auto* opt = c->add_option("--bundle", o.bundles, "ModelBundle file")
                    ->check(CLI::ExistingFile);
    if (!many) opt->expected(1);
  };

  auto* plan = app.add_subcommand("plan", "partition and resource report (JSON)");
  common(plan), ratio(plan), bundle(plan, false);

  auto* sim = app.add_subcommand("simulate", "run distributed inference on a bundle");
  common(sim), ratio(sim), bundle(sim, false);
  sim->add_option("--loss-pair", o.loss_pair, "per-link drop probability");
  sim->add_option("--loss-rx", o.loss_rx, "receive blackout probability");
  sim->add_option("--loss-tx", o.loss_tx, "transmit blackout probability");
  sim->add_flag("--oracle-check", o.oracle_check,
                "compare with the reference forward and print max_dev");
  sim->add_option("--trace", o.trace, "JSON-lines round trace path");
  sim->add_option("--input", o.input, "input CSV (N rows, F columns)")
      ->check(CLI::ExistingFile);
  sim->add_option("--tensor-out", o.tensor_out, "output tensor CSV path");

  auto* feas = app.add_subcommand("sweep-feasibility",
                                  "boundary CSV: N,F_max,binding_constraint");
  common(feas), ratio(feas);
  feas->add_option("--tokens-list", o.tokens_list, "N values")->capture_default_str();
  feas->add_option("--max-features", o.max_features, "width search cap")
      ->capture_default_str();

  auto* lat = app.add_subcommand("sweep-latency", "latency CSV over D x ratio x block");
  common(lat);
  lat->add_option("--devices-list", o.devices_list, "D values")->capture_default_str();
  lat->add_option("--ratios", o.ratios, "pruning ratios")->capture_default_str();

  auto* rob = app.add_subcommand("sweep-robustness",
                                 "output deviation vs message loss, one column per bundle");
  common(rob), ratio(rob), bundle(rob, true);
  rob->add_option("--losses", o.losses, "loss percentages")->capture_default_str();
  rob->add_option("--loss-mode", o.loss_mode, "pair|rx|tx")->capture_default_str();
  rob->add_option("--trials", o.trials, "seeds per point")->capture_default_str();

  auto* dump = app.add_subcommand("dump-bundle", "bundle header, shapes and masks as JSON");
  dump->add_option("--out", o.out, "output path")->capture_default_str();
  bundle(dump, false);

  auto* gen = app.add_subcommand("gen-bundle", "write a random (optionally pruned) bundle");
  common(gen), ratio(gen);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*plan) return cmd_plan(o);
    if (*sim) return cmd_simulate(o);
    if (*feas) return cmd_sweep_feasibility(o);
    if (*lat) return cmd_sweep_latency(o);
    if (*rob) return cmd_sweep_robustness(o);
    if (*dump) return cmd_dump_bundle(o);
    if (*gen) return cmd_gen_bundle(o);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitError;
  }
  return kExitError;
}
