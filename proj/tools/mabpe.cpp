// mabpe: command-line front end.
//
//   mabpe attack   --samples-dir D --oracle SPEC --out O [...]
//   mabpe minimize --trace T --oracle SPEC [--out report.json] [--ae file]
//   mabpe fixture build <spec> -o <file>
//   mabpe report   --stats stats.json
//
// Exit codes: 0 success, 2 no detected samples, 3 oracle unhealthy, 1 other errors.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mabpe/campaign.hpp"
#include "mabpe/fixture.hpp"
#include "mabpe/minimizer.hpp"
#include "mabpe/report.hpp"

namespace {

constexpr int kExitError = 1;
constexpr int kExitNoDetected = 2;
constexpr int kExitUnhealthy = 3;

mabpe::SelectionPolicy parse_policy(const std::string& s) {
  if (s == "thompson") return mabpe::SelectionPolicy::Thompson;
  if (s == "random") return mabpe::SelectionPolicy::UniformRandom;
  throw mabpe::Error("unknown policy '" + s + "' (thompson|random)");
}

int cmd_attack(const std::string& samples, const std::string& oracle, std::size_t max_attempts, std::uint64_t seed,
               const std::string& pool, const std::string& names, const std::string& out, std::size_t workers,
               bool no_minimize, bool no_requeue, bool micro_arms, const std::string& policy,
               const std::vector<std::string>& transfer) {
  mabpe::CampaignConfig cfg;
  cfg.oracle = mabpe::parse_oracle_spec(oracle);
  cfg.max_attempts = max_attempts;
  cfg.seed = seed;
  cfg.content_pool_dir = pool;
  cfg.name_list_path = names;
  cfg.samples_dir = samples;
  cfg.output_dir = out;
  cfg.workers = workers;
  cfg.minimize = !no_minimize;
  cfg.requeue_on_validation_failure = !no_requeue;
  cfg.policy = parse_policy(policy);
  if (micro_arms) cfg.kinds.insert(cfg.kinds.end(), mabpe::kMicroActions.begin(), mabpe::kMicroActions.end());
  for (const auto& t : transfer) cfg.transfer_oracles.push_back(mabpe::parse_oracle_spec(t));
  const auto stats = mabpe::run_campaign(cfg);
  std::cout << mabpe::render_summary(stats);
  return 0;
}

int cmd_minimize(const std::string& trace_path, const std::string& oracle, const std::string& out,
                 const std::string& ae_path, bool fixed_point) {
  const auto trace = mabpe::load_trace(trace_path);
  const mabpe::OracleGateway gateway(mabpe::parse_oracle_spec(oracle));
  if (!gateway.healthy()) throw mabpe::OracleUnhealthy(oracle);
  mabpe::MinimizeOptions opt;
  opt.fixed_point = fixed_point;
  const auto mt = mabpe::minimize(
      trace, [&](mabpe::ByteView b) { return gateway.classify_unbudgeted(b); }, opt);
  const auto report = mabpe::minimization_report(mt, trace.original.origin_id()).dump(2) + "\n";
  if (out.empty())
    std::cout << report;
  else
    mabpe::detail::write_file(out, report);
  if (!ae_path.empty()) {
    const auto b = mt.final_sample->bytes();
    mabpe::detail::write_file(ae_path, std::string_view(reinterpret_cast<const char*>(b.data()), b.size()));
  }
  if (!mt.verified) {
    std::cerr << "minimized sample is not evasive against " << oracle << '\n';
    return kExitError;
  }
  return 0;
}

int cmd_fixture_build(const std::string& spec, const std::string& out) {
  const auto raw = mabpe::build_fixture(mabpe::load_fixture_spec(spec));
  const auto b = raw.bytes();
  mabpe::detail::write_file(out, std::string_view(reinterpret_cast<const char*>(b.data()), b.size()));
  return 0;
}

int cmd_report(const std::string& stats) {
  std::cout << mabpe::render_summary(mabpe::load_stats(stats));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bandit-driven PE rewriting against hard-label classifiers"};
  app.require_subcommand(1);

  auto* attack = app.add_subcommand("attack", "run an evasion campaign over a sample directory");
  std::string samples, oracle, pool, names, out, policy = "thompson";
  std::size_t max_attempts = 60, workers = 1;
  std::uint64_t seed = 0;
  bool no_minimize = false, no_requeue = false, micro_arms = false;
  std::vector<std::string> transfer;
  attack->add_option("--samples-dir", samples, "directory of PE samples")->required();
  attack->add_option("--oracle", oracle, "builtin:<name>[:<params>] or http:<host:port>")->required();
  attack->add_option("--max-attempts", max_attempts, "generation scans per sample")->check(CLI::PositiveNumber);
  attack->add_option("--seed", seed, "campaign seed");
  attack->add_option("--content-pool", pool, "directory of benign content blobs");
  attack->add_option("--names", names, "file with one benign section name per line");
  attack->add_option("--out", out, "output directory")->required();
  attack->add_option("--workers", workers, "concurrent samples")->check(CLI::PositiveNumber);
  attack->add_option("--policy", policy, "thompson or random");
  attack->add_option("--transfer", transfer, "extra oracles for transfer.json");
  attack->add_flag("--no-minimize", no_minimize, "keep generation traces as found");
  attack->add_flag("--no-requeue", no_requeue, "do not retry samples that fail validation");
  attack->add_flag("--micro-arms", micro_arms, "also pull micro-actions directly");

  auto* minimize = app.add_subcommand("minimize", "minimize a recorded trace");
  std::string trace_path, min_oracle, min_out, ae_path;
  bool fixed_point = false;
  minimize->add_option("--trace", trace_path, "trace JSON")->required()->check(CLI::ExistingFile);
  minimize->add_option("--oracle", min_oracle, "oracle spec")->required();
  minimize->add_option("--out", min_out, "write the report here instead of stdout");
  minimize->add_option("--ae", ae_path, "write the minimized sample here");
  minimize->add_flag("--fixed-point", fixed_point, "repeat removal passes until stable");

  auto* fixture = app.add_subcommand("fixture", "synthetic PE fixtures");
  fixture->require_subcommand(1);
  auto* build = fixture->add_subcommand("build", "build a fixture from a spec file");
  std::string spec, fixture_out;
  build->add_option("spec", spec, "fixture spec")->required()->check(CLI::ExistingFile);
  build->add_option("-o,--output", fixture_out, "output file")->required();

  auto* report = app.add_subcommand("report", "summarize a stats.json");
  std::string stats;
  report->add_option("--stats", stats, "stats.json")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*attack)
      return cmd_attack(samples, oracle, max_attempts, seed, pool, names, out, workers, no_minimize, no_requeue,
                        micro_arms, policy, transfer);
    if (*minimize) return cmd_minimize(trace_path, min_oracle, min_out, ae_path, fixed_point);
    if (*build) return cmd_fixture_build(spec, fixture_out);
    if (*report) return cmd_report(stats);
  } catch (const mabpe::NoDetectedSamples& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitNoDetected;
  } catch (const mabpe::OracleUnhealthy& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUnhealthy;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitError;
  }
  return kExitError;
}
