#pragma once

// Command-line front end: fit, fit-multilevel, simulate and generate.

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "inference.hpp"
#include "io.hpp"
#include "multilevel.hpp"
#include "simulate.hpp"

namespace bfpca {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitSampler = 3;

struct CliOptions {
  std::string config;
  std::string out = "bfpca_out";
  std::optional<std::uint64_t> seed;
  std::optional<int> chains, warmup, samples;
  bool quiet = false;
  bool smoke = false;  // n_warmup 200, n_samples 100 unless given explicitly
  int B = 20;
  std::vector<std::string> argv;
};

namespace detail {

/// Config file first, then --smoke, then explicit flags.
inline RunConfig resolve_config(const CliOptions& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : read_config(o.config);
  if (o.smoke) {
    c.sampler.n_warmup = 200;
    c.sampler.n_samples = 100;
  }
  if (o.seed) c.sampler.seed = *o.seed;
  if (o.chains) c.sampler.n_chains = *o.chains;
  if (o.warmup) c.sampler.n_warmup = *o.warmup;
  if (o.samples) c.sampler.n_samples = *o.samples;
  c.sampler.progress = !o.quiet;
  validate_config(c);
  return c;
}

inline json base_manifest(const std::string& command, const CliOptions& o, const RunConfig& c) {
  json inputs = json::array();
  if (!o.config.empty()) inputs.push_back({{"role", "config"}, {"path", o.config}, {"sha256", sha256_file(o.config)}});
  return {{"command", command}, {"argv", o.argv}, {"version", kVersion}, {"config", config_json(c)}, {"inputs", inputs}};
}

inline json chain_seeds(const SamplerConfig& s) {
  json a = json::array();
  for (int c = 0; c < s.n_chains; ++c) a.push_back(chain_seed(s.seed, c));
  return {{"sampler", s.seed}, {"chains", a}};
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline void report_warnings(const std::vector<std::string>& warnings) {
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
}

/// Runs `body`, mapping exceptions to exit codes; the manifest is always
/// written once the output directory exists.
template <typename Body>
int guarded(const CliOptions& o, const std::string& command, Body&& body) {
  const auto t0 = std::chrono::steady_clock::now();
  json manifest = {{"command", command}, {"argv", o.argv}, {"version", kVersion}};
  int code = kExitOk;
  try {
    code = body(manifest);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    manifest["status"] = "validation_error";
    manifest["error"] = e.what();
    code = kExitValidation;
  } catch (const SamplerFailure& e) {
    std::cerr << "sampler failure: " << e.what() << "\n";
    manifest["status"] = "sampler_failure";
    manifest["error"] = e.what();
    code = kExitSampler;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    manifest["status"] = "error";
    manifest["error"] = e.what();
    code = kExitValidation;
  }
  if (!manifest.contains("status")) manifest["status"] = code == kExitOk ? "ok" : "invalid_samples";
  manifest["timing"] = {{"seconds", seconds_since(t0)}};
  try {
    std::filesystem::create_directories(o.out);
    write_json(manifest, std::filesystem::path(o.out) / "manifest.json");
  } catch (const std::exception& e) {
    std::cerr << "error: cannot write manifest: " << e.what() << "\n";
    if (code == kExitOk) code = kExitValidation;
  }
  return code;
}

}  // namespace detail

inline int cmd_fit(const std::string& data_csv, const CliOptions& o) {
  return detail::guarded(o, "fit", [&](json& manifest) {
    const RunConfig c = detail::resolve_config(o);
    manifest = detail::base_manifest("fit", o, c);
    manifest["inputs"].push_back({{"role", "data"}, {"path", data_csv}, {"sha256", sha256_file(data_csv)}});
    FunctionalDataset data = read_functional_csv(data_csv);
    data.validate();
    const BasisSystem basis = make_basis(data.grid, c.Q, c.prior.alpha, c.degree);
    manifest["seeds"] = detail::chain_seeds(c.sampler);
    manifest["grid"] = {{"M", data.M()}, {"t_first", data.grid.as_vector()(0)}, {"t_last", data.grid.as_vector()(data.M() - 1)}};

    const std::filesystem::path out(o.out);
    std::filesystem::create_directories(out);
    const FitResult fit = run(data, basis, c.prior, c.sampler, c.K);
    detail::report_warnings(fit.diagnostics.warnings);
    write_samples(fit.samples, out);
    write_json(diagnostics_json(fit.diagnostics, data.grid.as_vector()), out / "diagnostics.json");
    if (!fit.samples.valid) {
      std::cerr << "sampler failure: " << fit.samples.failure << " (partial samples written, flagged invalid)\n";
      manifest["status"] = "invalid_samples";
      manifest["error"] = fit.samples.failure;
      return kExitSampler;
    }
    write_summary(summarize(fit.samples, basis), out, data.ids);
    if (!o.quiet) std::cerr << "fit: " << fit.samples.draws.size() << " draws written to " << out.string() << "\n";
    return kExitOk;
  });
}

inline int cmd_fit_multilevel(const std::string& data_csv, const CliOptions& o) {
  return detail::guarded(o, "fit-multilevel", [&](json& manifest) {
    const RunConfig c = detail::resolve_config(o);
    manifest = detail::base_manifest("fit-multilevel", o, c);
    manifest["inputs"].push_back({{"role", "data"}, {"path", data_csv}, {"sha256", sha256_file(data_csv)}});
    const MultilevelDataset data = read_multilevel_csv(data_csv, c.visits);
    const BasisSystem basis = make_basis(data.grid, c.Q, c.prior.alpha, c.degree);
    manifest["seeds"] = detail::chain_seeds(c.sampler);
    manifest["design"] = {{"subjects", data.N()}, {"rows", data.rows()}, {"visits", data.visit_ids}};

    const std::filesystem::path out(o.out);
    std::filesystem::create_directories(out);
    const MultilevelSpec spec{c.K1, c.K2, c.visit_effects};
    const MultilevelFitResult fit = run_multilevel(data, basis, c.prior, c.sampler, spec);
    detail::report_warnings(fit.diagnostics.warnings);
    write_multilevel_samples(fit.samples, out);
    json diag = diagnostics_json(fit.diagnostics, data.grid.as_vector());
    diag["acceptance_rate_X1"] = fit.acceptance_rate_X1;
    diag["acceptance_rate_X2"] = fit.acceptance_rate_X2;
    write_json(diag, out / "diagnostics.json");
    if (!fit.samples.valid) {
      std::cerr << "sampler failure: " << fit.samples.failure << " (partial samples written, flagged invalid)\n";
      manifest["status"] = "invalid_samples";
      manifest["error"] = fit.samples.failure;
      return kExitSampler;
    }
    write_summary(summarize_multilevel(fit.samples, basis), out, data.subject_ids);
    if (!o.quiet) std::cerr << "fit-multilevel: " << fit.samples.draws.size() << " draws written to " << out.string() << "\n";
    return kExitOk;
  });
}

/// --seed is the study seed here; the config's N, M, J size the scenario.
inline int cmd_simulate(const std::string& scenario, const CliOptions& o) {
  return detail::guarded(o, "simulate", [&](json& manifest) {
    const RunConfig c = detail::resolve_config(o);
    manifest = detail::base_manifest("simulate", o, c);
    const ScenarioSpec spec = make_scenario(scenario, c.study_N, c.study_M, c.study_J);
    StudyOptions so;
    so.B = o.B;
    so.seed = o.seed.value_or(1);
    so.threads = c.study_threads;
    so.Q = c.Q;
    so.degree = c.degree;
    so.progress = !o.quiet;
    manifest["study_seed"] = so.seed;
    manifest["B"] = so.B;
    const StudyReport report = replicate_study(spec, so, c.sampler, c.prior);
    for (const auto& r : report.replicates)
      if (!r.ok) std::cerr << "warning: replicate " << r.replicate << " failed: " << r.error << "\n";
    if (report.n_ok == 0) {
      manifest["status"] = "all_replicates_failed";
      write_study(report, o.out, manifest);
      return kExitSampler;
    }
    // guarded() rewrites the same manifest with timing added
    write_study(report, o.out, manifest);
    if (!o.quiet) std::cerr << "simulate: " << report.n_ok << "/" << so.B << " replicates ok\n";
    return kExitOk;
  });
}

/// Writes one simulated dataset as CSV (multilevel layout for ML).
inline int cmd_generate(const std::string& scenario, const CliOptions& o) {
  return detail::guarded(o, "generate", [&](json& manifest) {
    const RunConfig c = detail::resolve_config(o);
    manifest = detail::base_manifest("generate", o, c);
    const ScenarioSpec spec = make_scenario(scenario, c.study_N, c.study_M, c.study_J);
    const std::uint64_t seed = o.seed.value_or(1);
    manifest["data_seed"] = seed;
    manifest["scenario"] = spec.name;
    const SimulatedData sim = generate_dataset(spec, seed);
    const std::filesystem::path out(o.out);
    std::filesystem::create_directories(out);
    if (sim.multilevel)
      write_multilevel_csv(sim.multi, out / "data.csv");
    else
      write_functional_csv(sim.single, out / "data.csv");
    return kExitOk;
  });
}

inline int run_cli(int argc, char** argv) {
  CLI::App app{"Bayesian functional principal components with Stiefel eigenfunctions"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  CliOptions o;
  for (int i = 0; i < argc; ++i) o.argv.emplace_back(argv[i]);
  std::string target;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--seed", o.seed, "random seed");
    sub->add_option("--chains", o.chains, "number of chains");
    sub->add_option("--warmup", o.warmup, "warm-up iterations per chain");
    sub->add_option("--samples", o.samples, "retained draws per chain");
    sub->add_flag("--quiet", o.quiet, "suppress progress output");
    sub->add_flag("--smoke", o.smoke, "short run: 200 warm-up, 100 retained");
  };
  auto* fit = app.add_subcommand("fit", "fit single-level FPCA to an id,t_1..t_M CSV");
  fit->add_option("data", target, "data CSV")->required();
  common(fit);
  auto* ml = app.add_subcommand("fit-multilevel", "fit two-level FPCA to a subject,visit,t_1..t_M CSV");
  ml->add_option("data", target, "data CSV")->required();
  common(ml);
  auto* sim = app.add_subcommand("simulate", "replication study on S1, S2 or ML");
  sim->add_option("scenario", target, "S1, S2 or ML")->required();
  sim->add_option("--B", o.B, "number of replicates")->check(CLI::PositiveNumber);
  common(sim);
  auto* gen = app.add_subcommand("generate", "write one simulated dataset");
  gen->add_option("scenario", target, "S1, S2 or ML")->required();
  common(gen);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }
  if (fit->parsed()) return cmd_fit(target, o);
  if (ml->parsed()) return cmd_fit_multilevel(target, o);
  if (sim->parsed()) return cmd_simulate(target, o);
  return cmd_generate(target, o);
}

}  // namespace bfpca
