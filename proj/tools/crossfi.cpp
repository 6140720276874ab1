// crossfi command-line entry point: synth, convert-wigesture, train, eval,
// ablate, plot.

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include "crossfi/error.hpp"
#include "crossfi/eval.hpp"
#include "crossfi/plot.hpp"
#include "crossfi/wigesture.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace crossfi;

namespace {

constexpr int kManifestVersion = 1;

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string config;
  std::string log_level = "warn";
  std::vector<std::string> argv;
};

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_json(const json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

fs::path require_out(const Globals& g, const std::string& command) {
  if (g.out.empty()) throw ConfigError(command + ": --out is required");
  const fs::path out = g.out;
  std::error_code ec;
  fs::create_directories(out, ec);
  const fs::path probe = out / ".crossfi-write-probe";
  std::ofstream(probe) << "";
  if (ec || !fs::exists(probe)) throw DataError("output directory is not writable: " + out.string());
  fs::remove(probe, ec);
  return out;
}

// Written before any long-running work; argv replays the invocation.
void write_run_manifest(const Globals& g, const std::string& command, const fs::path& out) {
  std::string echo;
  for (const auto& a : g.argv) echo += (echo.empty() ? "" : " ") + a;
  json j = {{"format_version", kManifestVersion},
            {"command", command},
            {"command_line", echo},
            {"argv", g.argv},
            {"config_path", g.config},
            {"seed", g.seed ? json(*g.seed) : json(nullptr)},
            {"out", out.string()}};
  write_json(j, out / "run_manifest.json");
}

ScenarioData load_scenario_data(const fs::path& manifest) {
  if (!fs::exists(manifest)) throw DataError("dataset manifest not found: " + manifest.string());
  const auto dataset = data::load_dataset(manifest);
  ScenarioData d;
  d.samples = data::dataset_samples(dataset);
  d.shape = {dataset.manifest.packets_per_sample, dataset.manifest.subcarriers};
  d.classes = dataset.manifest.classes.size();
  if (d.samples.empty()) throw DataError("dataset yields no windows: " + manifest.string());
  return d;
}

// ---- synth ---------------------------------------------------------------

struct SynthArgs {
  std::size_t domains = 2;
  std::size_t classes = 4;
  std::size_t per_class = 50;
  double noise_std = 0.05;
  double tempo_step = 0.6;
  bool per_domain_channel = false;
  std::size_t paths = 3;
  std::size_t subcarriers = defaults::kSubcarriers;
  std::size_t packets = defaults::kPacketsPerSample;
  std::size_t stride = defaults::kStride;
  double sample_rate = defaults::kSampleRate;
};

std::vector<data::SyntheticDomainSpec> specs_from_flags(const SynthArgs& a, std::uint64_t seed) {
  std::vector<data::SyntheticDomainSpec> specs;
  Rng rng = Rng::derive(seed, {0x5EED});
  const std::uint64_t room = rng.next_u64();
  for (std::size_t d = 0; d < a.domains; ++d) {
    data::SyntheticDomainSpec s;
    s.domain_id = static_cast<int>(d);
    s.n_paths = a.paths;
    s.static_seed = a.per_domain_channel ? rng.next_u64() : room;
    s.class_motion_profiles =
        data::with_tempo(data::default_motion_profiles(a.classes), 1.0 + a.tempo_step * static_cast<double>(d));
    s.noise_std = a.noise_std;
    s.sample_rate = a.sample_rate;
    s.subcarriers = a.subcarriers;
    s.packets_per_sample = a.packets;
    s.stride = a.stride;
    specs.push_back(std::move(s));
  }
  return specs;
}

// Synth file: {"per_class": n, "domains": [{domain_id, n_paths, static_seed,
// noise_std, sample_rate, subcarriers, packets_per_sample, stride,
// profiles: [{frequency_hz, amplitude}]}]}
std::vector<data::SyntheticDomainSpec> specs_from_file(const json& j, SynthArgs& a) {
  if (!j.contains("domains") || !j["domains"].is_array()) throw SchemaError("domains", "expected an array");
  if (j.contains("per_class")) a.per_class = j["per_class"].get<std::size_t>();
  std::vector<data::SyntheticDomainSpec> specs;
  for (const auto& d : j["domains"]) {
    data::SyntheticDomainSpec s;
    s.domain_id = d.value("domain_id", static_cast<int>(specs.size()));
    s.n_paths = d.value("n_paths", s.n_paths);
    s.static_seed = d.value("static_seed", s.static_seed);
    s.noise_std = d.value("noise_std", s.noise_std);
    s.sample_rate = d.value("sample_rate", s.sample_rate);
    s.subcarriers = d.value("subcarriers", s.subcarriers);
    s.packets_per_sample = d.value("packets_per_sample", s.packets_per_sample);
    s.stride = d.value("stride", s.stride);
    if (!d.contains("profiles")) throw SchemaError("profiles", "each domain needs class motion profiles");
    for (const auto& p : d["profiles"]) {
      s.class_motion_profiles.push_back({p.at("frequency_hz").get<double>(), p.value("amplitude", 0.2)});
    }
    specs.push_back(std::move(s));
  }
  return specs;
}

void cmd_synth(const Globals& g, SynthArgs a) {
  const fs::path out = require_out(g, "synth");
  write_run_manifest(g, "synth", out);
  const std::uint64_t seed = g.seed.value_or(0);
  const auto specs = g.config.empty() ? specs_from_flags(a, seed) : specs_from_file(read_json(g.config), a);
  const auto dataset = data::synthesize_dataset(specs, a.per_class, seed);
  for (std::size_t i = 0; i < dataset.sessions.size(); ++i) {
    data::write_session(dataset.sessions[i], dataset.manifest.subcarriers, out / dataset.manifest.sessions[i].path);
  }
  data::write_manifest(dataset.manifest, out / "manifest.json");
  std::cout << "wrote " << dataset.sessions.size() << " sessions to " << out.string() << '\n';
}

// ---- train / eval --------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::optional<std::string> scenario;
  std::optional<std::size_t> k;
  std::optional<std::string> metric;
  bool use_mmd = false;
  bool use_unlabeled_target = false;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> batch_size;
  std::optional<double> lr;
  std::optional<std::string> template_method;
  std::optional<std::string> decay_mode;
  std::optional<std::string> alpha;
  std::optional<double> mmd_weight;
  std::optional<std::size_t> mmd_kernels;
  std::vector<int> source;
  std::vector<int> target;
};

ScenarioConfig base_config(const Globals& g) {
  return g.config.empty() ? ScenarioConfig{} : ScenarioConfig::from_json(read_json(g.config));
}

ScenarioConfig resolve_config(const Globals& g, const TrainArgs& a) {
  json j = base_config(g).to_json();
  if (a.scenario) j["scenario"] = *a.scenario;
  if (a.k) j["k"] = *a.k;
  if (a.metric) j["metric"] = *a.metric;
  if (a.use_mmd) j["use_mmd"] = true;
  if (a.use_unlabeled_target) j["use_unlabeled_target"] = true;
  if (a.epochs) j["epochs"] = *a.epochs;
  if (a.batch_size) j["batch_size"] = *a.batch_size;
  if (a.lr) j["learning_rate"] = *a.lr;
  if (a.template_method) j["template_method"] = *a.template_method;
  if (a.decay_mode) j["decay_mode"] = *a.decay_mode;
  if (!a.source.empty()) j["source_domains"] = a.source;
  if (!a.target.empty()) j["target_domains"] = a.target;
  if (a.alpha) {
    if (*a.alpha == "auto") {
      j["loss"]["alpha"] = "auto";
    } else {
      try {
        j["loss"]["alpha"] = std::stod(*a.alpha);
      } catch (const std::exception&) {
        throw SchemaError("alpha", "expected a number or 'auto', got '" + *a.alpha + "'");
      }
    }
  }
  if (a.mmd_weight) j["loss"]["mmd_weight"] = *a.mmd_weight;
  if (a.mmd_kernels) {
    j["loss"]["mmd_kernels"] = *a.mmd_kernels;
    j["loss"].erase("beta");
    j["loss"].erase("bandwidths");
  }
  if (g.seed) j["seed"] = *g.seed;
  return ScenarioConfig::from_json(j);
}

void cmd_train(const Globals& g, const TrainArgs& a) {
  const auto config = resolve_config(g, a);
  const fs::path out = require_out(g, "train");
  write_run_manifest(g, "train", out);
  write_json(config.to_json(), out / "config.json");
  write_json({{"data", fs::absolute(a.data).string()}}, out / "dataset.json");

  const auto scenario_data = load_scenario_data(a.data);
  auto run = run_scenario(config, scenario_data);
  auto& state = *run.state;
  save_checkpoint(state, out / "checkpoint.cfx");
  state.templates->save(out / "templates.cfx");
  write_loss_log(state.log, out / "loss_log.csv");
  run.report.save(out / "metrics.json");
  std::cout << fmt::format("{} accuracy {:.4f} ({} comparative, {} template, {} fine-tune steps)\n",
                           data::to_string(config.scenario), run.report.accuracy, state.progress.comparative_steps,
                           state.progress.template_steps, state.progress.finetune_steps);
}

void cmd_eval(const Globals& g, const std::string& run_dir, const std::string& templates_path,
              const std::string& data_path) {
  const fs::path run = run_dir;
  for (const char* f : {"checkpoint.cfx", "dataset.json"}) {
    if (!fs::exists(run / f)) throw DataError("missing run artifact: " + (run / f).string());
  }
  const fs::path tpl = templates_path.empty() ? run / "templates.cfx" : fs::path(templates_path);
  if (!fs::exists(tpl)) throw DataError("missing run artifact: " + tpl.string());

  Globals eg = g;
  if (eg.out.empty()) eg.out = (run / "eval").string();
  const fs::path out = require_out(eg, "eval");
  write_run_manifest(eg, "eval", out);

  auto state = load_checkpoint(run / "checkpoint.cfx");
  const auto templates = TemplateSet::load(tpl);
  const fs::path manifest = data_path.empty() ? fs::path(read_json(run / "dataset.json").at("data").get<std::string>())
                                              : fs::path(data_path);
  const auto scenario_data = load_scenario_data(manifest);
  auto splits = data::split_scenario(scenario_data.samples, state->config.split_config());
  state->normalizer.apply(splits.test, state->shape);
  auto report = evaluate(splits.test, templates, state->net, state->config.resolved_metric(), state->classes,
                         data::to_string(state->config.scenario), state->config.seed);
  report.save(out / "metrics.json");
  std::cout << fmt::format("accuracy {:.4f} on {} samples\n", report.accuracy, report.total());
}

// ---- ablate --------------------------------------------------------------

std::vector<AblationEntry> builtin_grid(const ScenarioConfig& base, const std::vector<std::string>& axes,
                                        const std::vector<std::size_t>& shots) {
  static const std::vector<std::string> metrics = {"attention", "gaussian", "cosine"};
  static const std::vector<std::string> methods = {"weight-net", "plain-average", "random-sample"};
  std::vector<AblationEntry> grid;
  for (const auto& axis : axes) {
    if (axis == "metric") {
      for (const auto& m : metrics) {
        ScenarioConfig c = base;
        c.scenario = data::Scenario::in_domain;
        c.metric = parse_metric(m);
        grid.push_back({"metric/" + m, c});
      }
    } else if (axis == "template") {
      for (const auto& t : methods) {
        ScenarioConfig c = base;
        c.scenario = data::Scenario::in_domain;
        c.template_method = parse_template_method(t);
        grid.push_back({"template/" + t, c});
      }
    } else if (axis == "shots") {
      ScenarioConfig ref = base;
      ref.scenario = data::Scenario::in_domain;
      grid.push_back({"shots/in-domain", ref});
      for (const auto& m : metrics) {
        for (std::size_t k : shots) {
          ScenarioConfig c = base;
          c.scenario = data::Scenario::k_shot;
          c.k = k;
          c.metric = parse_metric(m);
          grid.push_back({"shots/" + m + "/k" + std::to_string(k), c});
        }
      }
    } else {
      throw ConfigError("unknown ablation axis '" + axis + "' (metric, template, shots)");
    }
  }
  return grid;
}

// Grid file: [{"name": ..., "config": {overrides}}, ...]
std::vector<AblationEntry> grid_from_file(const ScenarioConfig& base, const json& j) {
  if (!j.is_array()) throw SchemaError("<root>", "ablation grid must be an array");
  std::vector<AblationEntry> grid;
  for (const auto& row : j) {
    json merged = base.to_json();
    const json overrides = row.value("config", json::object());
    for (const auto& [key, value] : overrides.items()) merged[key] = value;
    grid.push_back({row.value("name", "row" + std::to_string(grid.size())), ScenarioConfig::from_json(merged)});
  }
  return grid;
}

void cmd_ablate(const Globals& g, const std::string& data_path, const std::string& grid_path,
                const std::vector<std::string>& axes, const std::vector<std::size_t>& shots,
                std::optional<std::size_t> epochs) {
  ScenarioConfig base = base_config(g);
  if (g.seed) base.seed = *g.seed;
  if (epochs) base.epochs = *epochs;
  const auto grid = grid_path.empty() ? builtin_grid(base, axes, shots) : grid_from_file(base, read_json(grid_path));
  const fs::path out = require_out(g, "ablate");
  write_run_manifest(g, "ablate", out);
  const auto scenario_data = load_scenario_data(data_path);
  const auto rows = run_ablation(grid, scenario_data);
  write_ablation_table(rows, out / "ablation.csv");
  std::size_t failed = 0;
  for (const auto& r : rows) {
    if (r.report) {
      std::cout << fmt::format("{:<32} {:.4f}\n", r.name, r.report->accuracy);
    } else {
      ++failed;
      std::cout << fmt::format("{:<32} failed: {}\n", r.name, r.error);
    }
  }
  if (failed) spdlog::warn("{} of {} ablation rows failed", failed, rows.size());
}

// ---- plot ----------------------------------------------------------------

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

plot::LineChart chart_from_table(const fs::path& table, const std::string& series_by) {
  std::ifstream in(table);
  if (!in) throw DataError("ablation table not found: " + table.string());
  std::string line;
  std::getline(in, line);
  const auto header = split_line(line);
  auto col = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw DataError(table.string() + ": missing column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t c_scenario = col("scenario"), c_k = col("k"), c_metric = col("metric"),
                    c_method = col("template_method"), c_status = col("status"), c_acc = col("accuracy");

  std::set<std::size_t> ks;
  std::map<std::string, std::map<std::size_t, std::vector<double>>> points;
  std::vector<double> reference;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_line(line);
    if (f.size() < header.size() - 1 || f[c_status] != "ok") continue;
    const double acc = std::stod(f[c_acc]);
    if (f[c_scenario] == "in-domain") {
      reference.push_back(acc);
    } else if (f[c_scenario] == "k-shot") {
      const std::size_t k = std::stoul(f[c_k]);
      ks.insert(k);
      const std::string name = series_by == "template" ? f[c_method] : f[c_metric];
      points[name][k].push_back(acc);
    }
  }
  if (ks.empty()) throw DataError(table.string() + ": no successful k-shot rows to plot");

  plot::LineChart chart;
  chart.title = "Accuracy vs. shots";
  for (std::size_t k : ks) chart.x_ticks.push_back(std::to_string(k));
  for (const auto& [name, by_k] : points) {
    plot::Series s{name, {}, false};
    for (std::size_t k : ks) {
      auto it = by_k.find(k);
      if (it == by_k.end()) {
        s.values.emplace_back();
      } else {
        double sum = 0;
        for (double v : it->second) sum += v;
        s.values.emplace_back(sum / static_cast<double>(it->second.size()));
      }
    }
    chart.series.push_back(std::move(s));
  }
  if (!reference.empty()) {
    double sum = 0;
    for (double v : reference) sum += v;
    chart.reference = sum / static_cast<double>(reference.size());
  }
  return chart;
}

void cmd_plot(const Globals& g, const std::string& table, const std::string& series_by, const std::string& name) {
  auto chart = chart_from_table(table, series_by);
  const fs::path out = require_out(g, "plot");
  write_run_manifest(g, "plot", out);
  plot::write_svg(chart, out / name);
  std::cout << "wrote " << (out / name).string() << " (" << chart.x_ticks.size() << " x ticks)\n";
}

void cmd_convert(const Globals& g, const std::string& input, data::WiGestureOptions options) {
  const fs::path out = require_out(g, "convert-wigesture");
  write_run_manifest(g, "convert-wigesture", out);
  const auto report = data::convert_wigesture(input, out, options);
  std::cout << fmt::format("converted {} sessions ({} rows, {} skipped, {} missing)\n",
                           report.manifest.sessions.size(), report.rows, report.skipped_rows, report.missing_rows);
}

}  // namespace

int main(int argc, char** argv) {
  Globals g;
  g.argv.assign(argv, argv + argc);

  CLI::App app{"CrossFi cross-domain few-shot CSI classification"};
  app.require_subcommand(1);
  app.add_option("--seed", g.seed, "Seed for every random stream");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--config", g.config, "JSON config (scenario config, synth spec, or base config for ablate)");
  app.add_option("--log-level", g.log_level, "trace|debug|info|warn|error|off")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic multi-domain CSI dataset");
  s->add_option("--domains", synth.domains)->check(CLI::PositiveNumber);
  s->add_option("--classes", synth.classes)->check(CLI::PositiveNumber);
  s->add_option("--per-class", synth.per_class, "Windows per class and domain")->check(CLI::PositiveNumber);
  s->add_option("--noise-std", synth.noise_std)->check(CLI::NonNegativeNumber);
  s->add_option("--tempo-step", synth.tempo_step, "Domain d moves at tempo 1 + d*step")
      ->check(CLI::Range(0.0, 10.0));
  s->add_flag("--per-domain-channel", synth.per_domain_channel, "Independent static channel per domain");
  s->add_option("--paths", synth.paths)->check(CLI::PositiveNumber);
  s->add_option("--subcarriers", synth.subcarriers)->check(CLI::PositiveNumber);
  s->add_option("--packets", synth.packets, "Packets per window (t)")->check(CLI::PositiveNumber);
  s->add_option("--stride", synth.stride)->check(CLI::PositiveNumber);
  s->add_option("--sample-rate", synth.sample_rate)->check(CLI::PositiveNumber);

  std::string wg_input;
  data::WiGestureOptions wg;
  auto* cv = app.add_subcommand("convert-wigesture", "Convert WiGesture ESP32 CSV recordings");
  cv->add_option("input", wg_input, "Root of <person>/<gesture>/*.csv")->required();
  cv->add_option("--packets", wg.packets_per_sample)->check(CLI::PositiveNumber);
  cv->add_option("--stride", wg.stride)->check(CLI::PositiveNumber);
  cv->add_option("--period-ms", wg.sample_period_ms)->check(CLI::PositiveNumber);
  cv->add_option("--timestamp-column", wg.timestamp_column);
  cv->add_option("--timestamp-scale", wg.timestamp_to_ms, "Multiplier to milliseconds");
  cv->add_option("--data-column", wg.data_column);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train one scenario into a run directory");
  t->add_option("--data", train.data, "Dataset manifest.json")->required();
  t->add_option("--scenario", train.scenario)
      ->check(CLI::IsMember({"in-domain", "k-shot", "zero-shot", "new-class"}));
  t->add_option("--k", train.k)->check(CLI::PositiveNumber);
  t->add_option("--metric", train.metric)->check(CLI::IsMember({"attention", "gaussian", "cosine"}));
  t->add_flag("--use-mmd", train.use_mmd);
  t->add_flag("--use-unlabeled-target", train.use_unlabeled_target);
  t->add_option("--epochs", train.epochs)->check(CLI::PositiveNumber);
  t->add_option("--batch-size", train.batch_size)->check(CLI::PositiveNumber);
  t->add_option("--lr", train.lr);
  t->add_option("--template-method", train.template_method);
  t->add_option("--decay-mode", train.decay_mode);
  t->add_option("--alpha", train.alpha, "Positive-pair weight or 'auto'");
  t->add_option("--mmd-weight", train.mmd_weight)->check(CLI::NonNegativeNumber);
  t->add_option("--mmd-kernels", train.mmd_kernels)->check(CLI::PositiveNumber);
  t->add_option("--source", train.source, "Source domain ids");
  t->add_option("--target", train.target, "Target domain ids");

  std::string eval_run, eval_templates, eval_data;
  auto* e = app.add_subcommand("eval", "Evaluate a run directory on its test split");
  e->add_option("--run", eval_run)->required();
  e->add_option("--templates", eval_templates, "Template archive replacing the run's templates");
  e->add_option("--data", eval_data, "Dataset manifest (default: the one used for training)");

  std::string ab_data, ab_grid;
  std::vector<std::string> ab_axes{"metric", "template", "shots"};
  std::vector<std::size_t> ab_shots{1, 2, 5, 10};
  std::optional<std::size_t> ab_epochs;
  auto* ab = app.add_subcommand("ablate", "Run an ablation grid into a delimited table");
  ab->add_option("--data", ab_data)->required();
  ab->add_option("--grid", ab_grid, "JSON grid [{name, config}]");
  ab->add_option("--axes", ab_axes, "Built-in axes: metric template shots")->delimiter(',');
  ab->add_option("--shots", ab_shots)->delimiter(',');
  ab->add_option("--epochs", ab_epochs)->check(CLI::PositiveNumber);

  std::string pl_table, pl_by = "metric", pl_name = "accuracy_vs_shots.svg";
  auto* pl = app.add_subcommand("plot", "Render accuracy-vs-shots from an ablation table");
  pl->add_option("--table", pl_table)->required();
  pl->add_option("--series", pl_by, "Line per metric or template")->check(CLI::IsMember({"metric", "template"}));
  pl->add_option("--name", pl_name, "Figure file name");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return static_cast<int>(ExitCode::config);
  }
  spdlog::set_level(spdlog::level::from_str(g.log_level));

  try {
    if (*s) cmd_synth(g, synth);
    else if (*cv) cmd_convert(g, wg_input, wg);
    else if (*t) cmd_train(g, train);
    else if (*e) cmd_eval(g, eval_run, eval_templates, eval_data);
    else if (*ab) cmd_ablate(g, ab_data, ab_grid, ab_axes, ab_shots, ab_epochs);
    else if (*pl) cmd_plot(g, pl_table, pl_by, pl_name);
    return 0;
  } catch (const Error& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return static_cast<int>(ex.exit_code());
  } catch (const json::exception& ex) {
    std::cerr << "error: config: " << ex.what() << '\n';
    return static_cast<int>(ExitCode::config);
  } catch (const fs::filesystem_error& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return static_cast<int>(ExitCode::data);
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return static_cast<int>(ExitCode::runtime);
  }
}
