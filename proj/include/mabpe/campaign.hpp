#pragma once

// Attack campaign: per-sample bandit loop, the shared work queue, content
// pool and the on-disk outputs of a run.

#include <algorithm>
#include <cctype>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <functional>
#include <iostream>
#include <limits>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "mabpe/actions.hpp"
#include "mabpe/bandit.hpp"
#include "mabpe/digest.hpp"
#include "mabpe/minimizer.hpp"
#include "mabpe/oracle.hpp"
#include "mabpe/report.hpp"
#include "mabpe/stats.hpp"

namespace mabpe {

class NoDetectedSamples : public Error {
 public:
  NoDetectedSamples() : Error("no sample is detected by the oracle") {}
};

class OracleUnhealthy : public Error {
 public:
  explicit OracleUnhealthy(const std::string& oracle) : Error("oracle is not healthy: " + oracle) {}
};

class InvalidConfig : public Error {
 public:
  explicit InvalidConfig(const std::string& what) : Error("invalid campaign config: " + what) {}
};

using Rng = std::mt19937_64;

// First violated property of a rewrite, or nullopt when it is accepted.
using Validator = std::function<std::optional<std::string>(const ParsedPe& original, const ParsedPe& rewritten)>;

// Ids contain no whitespace so they fit the arm snapshot format.
inline std::string sanitize_id(std::string_view name) {
  std::string s;
  for (char c : name) s += (std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-' || c == '_') ? c : '_';
  return s.empty() ? "_" : s;
}

class ContentPool {
 public:
  static constexpr std::size_t kRandomMin = 256;
  static constexpr std::size_t kRandomMax = 4096;

  ContentPool() = default;
  explicit ContentPool(std::vector<ContentPayload> blobs) : blobs_(std::move(blobs)) {}

  // Regular, non-empty files in name order. An empty path gives an empty pool.
  static ContentPool load(const std::filesystem::path& dir) {
    ContentPool pool;
    if (dir.empty()) return pool;
    if (!std::filesystem::is_directory(dir)) throw IoError("content pool '" + dir.string() + "' is not a directory");
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      auto bytes = detail::read_bytes(f);
      if (!bytes.empty()) pool.blobs_.push_back({std::move(bytes), sanitize_id(f.filename().string())});
    }
    return pool;
  }

  bool empty() const { return blobs_.empty(); }
  const std::vector<ContentPayload>& blobs() const { return blobs_; }

  static ContentPayload random_bytes(std::size_t n, Rng& rng) {
    ContentPayload c;
    c.bytes.resize(n);
    for (auto& b : c.bytes) b = static_cast<std::uint8_t>(rng() & 0xFF);
    c.id = "rnd-" + hex_digest(c.bytes).substr(0, 16);
    return c;
  }

  // Uniform pool blob clipped to `max_len`, or random bytes when the pool is
  // empty: `exact_len` of them if given, otherwise a length in [256, 4096].
  ContentPayload draw(Rng& rng, std::size_t max_len = std::numeric_limits<std::size_t>::max(),
                      std::optional<std::size_t> exact_len = std::nullopt) const {
    if (blobs_.empty()) {
      std::size_t n = exact_len ? *exact_len : std::uniform_int_distribution<std::size_t>(kRandomMin, kRandomMax)(rng);
      return random_bytes(std::min(n, max_len), rng);
    }
    const auto& b = blobs_[std::uniform_int_distribution<std::size_t>(0, blobs_.size() - 1)(rng)];
    if (b.bytes.size() <= max_len) return b;
    return {Bytes(b.bytes.begin(), b.bytes.begin() + static_cast<std::ptrdiff_t>(max_len)),
            b.id + ":" + std::to_string(max_len)};
  }

 private:
  std::vector<ContentPayload> blobs_;
};

struct CampaignConfig {
  OracleSpec oracle;
  std::size_t max_attempts = 60;
  std::uint64_t seed = 0;
  std::filesystem::path content_pool_dir;
  std::filesystem::path name_list_path;
  std::filesystem::path samples_dir;
  std::filesystem::path output_dir;
  std::size_t workers = 1;
  bool minimize = true;
  bool requeue_on_validation_failure = true;
  SelectionPolicy policy = SelectionPolicy::Thompson;
  // Pullable arms. Micro-actions may be added; by default they are only
  // used as minimizer substitutes.
  std::vector<ActionKind> kinds{kMacroActions.begin(), kMacroActions.end()};
  ActionConfig action_config;
  Validator validate = functionality_violation;
  // Extra columns of transfer.json.
  std::vector<OracleSpec> transfer_oracles;
  std::function<void(const std::string&)> warn = [](const std::string& m) { std::cerr << "warning: " << m << '\n'; };

  void check() const {
    if (max_attempts < 1) throw InvalidConfig("max_attempts must be >= 1");
    if (workers < 1) throw InvalidConfig("workers must be >= 1");
    if (kinds.empty()) throw EmptyKinds();
  }
};

// Everything a worker needs besides the sample.
struct AttackContext {
  const OracleGateway& gateway;
  ArmPool& pool;
  const ContentPool& content;
  const NameList& names;
  SelectionPolicy policy = SelectionPolicy::Thompson;
  bool minimize = true;
  ActionConfig action_config{};
  Validator validate = functionality_violation;
};

namespace detail {

inline std::vector<std::size_t> slack_targets(const ParsedPe& p, std::uint64_t need) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < p.section_count(); ++i)
    if (section_slack(p, i) >= need) out.push_back(i);
  return out;
}

template <class T>
const T& pick(const std::vector<T>& v, Rng& rng) {
  return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
}

inline std::size_t rename_target(const ParsedPe& p, const std::string& name, Rng& rng) {
  std::vector<std::size_t> differ;
  for (std::size_t i = 0; i < p.section_count(); ++i)
    if (p.sections()[i].name_string() != name) differ.push_back(i);
  if (differ.empty()) return std::uniform_int_distribution<std::size_t>(0, p.section_count() - 1)(rng);
  return pick(differ, rng);
}

}  // namespace detail

// Whether the arm can be pulled on the current sample.
inline bool arm_applicable(const ParsedPe& p, const Arm& a) {
  if (!applicable(p, a.kind)) return false;
  if (a.kind == ActionKind::SP && !a.is_parent())
    return !detail::slack_targets(p, detail::content_size(a.payload)).empty();
  return true;
}

// Concrete action for one pull. Parent arms draw fresh content.
inline AppliedAction materialize(const Arm& arm, const ParsedPe& p, const ContentPool& content,
                                 const NameList& names, Rng& rng) {
  using A = ActionKind;
  AppliedAction a;
  a.kind = arm.kind;
  a.payload = arm.payload;
  switch (arm.kind) {
    case A::OA:
      if (arm.is_parent()) a.payload = content.draw(rng);
      break;
    case A::SA:
      if (arm.is_parent()) a.payload = content.draw(rng);
      a.new_section_name = detail::pick(names.names(), rng);
      break;
    case A::SP: {
      if (arm.is_parent()) {
        a.target = detail::pick(detail::slack_targets(p, 1), rng);
        const auto slack = section_slack(p, *a.target);
        a.payload = content.draw(rng, slack, slack);
      } else {
        a.target = detail::pick(detail::slack_targets(p, detail::content_size(arm.payload)), rng);
      }
      break;
    }
    case A::SR: {
      if (arm.is_parent()) {
        const auto& name = detail::pick(names.names(), rng);
        a.payload = NamePayload{name, sanitize_id(name)};
      }
      a.target = detail::rename_target(p, std::get<NamePayload>(a.payload).name, rng);
      break;
    }
    case A::SP1: a.target = detail::pick(detail::slack_targets(p, 1), rng); break;
    case A::CP1: {
      std::vector<std::size_t> code;
      for (auto i : detail::slack_targets(p, 1))
        if (p.sections()[i].executable()) code.push_back(i);
      a.target = detail::pick(code, rng);
      break;
    }
    case A::SR1:
      a.target = std::uniform_int_distribution<std::size_t>(0, p.section_count() - 1)(rng);
      break;
    default: break;
  }
  return a;
}

enum class SampleOutcome { Evaded, BudgetExhausted, ValidationFailed, Unverified };

struct SampleResult {
  SampleOutcome outcome = SampleOutcome::BudgetExhausted;
  std::optional<MinimizedTrace> minimized;
  std::vector<AppliedAction> trace;  // generation trace up to the evasive pull
  std::vector<ArmId> pulled;         // arm behind each trace entry
  std::size_t attempts = 0;          // generation scans in this run
  std::size_t minimization_scans = 0;
  std::optional<std::string> violation;
};

// Every retained action counted as essential is credited to the pool.
inline void credit_essential(ArmPool& pool, const MinimizedTrace& mt, const std::vector<ArmId>& pulled) {
  for (const auto& r : mt.retained) {
    const auto source = pulled.at(r.origin);
    const auto& act = r.action;
    if (is_macro(act.kind) && payload_is_concrete(act.payload)) {
      if (auto existing = pool.find(act.kind, act.payload)) {
        pool.record_essential(*existing);
        continue;
      }
      try {
        pool.add_content_arm(act.kind, act.payload);
        continue;
      } catch (const NoParent&) {
      }
    }
    pool.record_essential(source);
  }
}

// Trace kept as generated; only the final replay is re-scanned.
inline MinimizedTrace unminimized(const Trace& t, const LabelFn& oracle, const ActionConfig& cfg) {
  MinimizedTrace mt;
  const auto original = ParsedPe::parse(t.original);
  for (std::size_t i = 0; i < t.actions.size(); ++i) {
    mt.retained.push_back({t.actions[i], i, t.actions[i].kind, std::nullopt});
    mt.steps.push_back({t.actions[i], StepOutcome::Kept, std::nullopt});
  }
  const auto bytes = replay(original, t.actions, cfg).sample.serialize();
  ++mt.oracle_calls;
  mt.verified = oracle(bytes) == Label::Benign;
  mt.bytes_changed = bytes_changed(t.original.bytes(), bytes);
  mt.final_sample.emplace(bytes, t.original.origin_id());
  mt.causes = infer_causes(mt);
  return mt;
}

// One pass of the generation loop. The caller has already established that
// `original` is detected.
inline SampleResult run_sample(const RawBinary& original, AttackContext& ctx, Budget& budget, Rng& rng) {
  const auto base = ParsedPe::parse(original);
  SampleResult res;
  ParsedPe current = base;
  while (!budget.exhausted()) {
    const auto snapshot = ctx.pool.snapshot();
    ArmId id;
    try {
      id = select_arm(snapshot, [&](const Arm& a) { return arm_applicable(current, a); }, rng, ctx.policy);
    } catch (const NoApplicableArm&) {
      break;
    }
    const auto arm = ctx.pool.arm(id);
    const auto action = materialize(arm, current, ctx.content, ctx.names, rng);
    auto next = apply(current, action, ctx.action_config);
    ScanResult scan;
    try {
      scan = ctx.gateway.scan(next.serialize(), budget);
    } catch (const BudgetExhausted&) {
      break;
    }
    ++res.attempts;
    res.trace.push_back(action);
    res.pulled.push_back(id);
    if (scan.label == Label::Malicious) {
      ctx.pool.record_failure(id);
      current = std::move(next);
      continue;
    }

    const Trace trace{original, res.trace, to_string(ctx.gateway.spec())};
    const LabelFn label = [&](ByteView b) { return ctx.gateway.classify_unbudgeted(b); };
    MinimizedTrace mt;
    if (ctx.minimize) {
      MinimizeOptions opt;
      opt.max_oracle_calls = minimization_call_bound(trace.actions.size());
      opt.action_config = ctx.action_config;
      mt = mabpe::minimize(trace, label, opt);
    } else {
      mt = unminimized(trace, label, ctx.action_config);
    }
    res.minimization_scans = mt.oracle_calls;
    if (!mt.verified) {
      res.outcome = SampleOutcome::Unverified;
      res.minimized = std::move(mt);
      return res;
    }
    credit_essential(ctx.pool, mt, res.pulled);
    const auto final_pe = ParsedPe::parse(*mt.final_sample);
    res.violation = ctx.validate(base, final_pe);
    res.outcome = res.violation ? SampleOutcome::ValidationFailed : SampleOutcome::Evaded;
    res.minimized = std::move(mt);
    return res;
  }
  res.outcome = SampleOutcome::BudgetExhausted;
  return res;
}

// Sample order, then requeued samples in the order they failed validation.
class WorkQueue {
 public:
  WorkQueue(std::size_t n, std::size_t max_attempts, const std::vector<std::size_t>& pending)
      : pending_(pending.begin(), pending.end()), budgets_(n, Budget(max_attempts)), requeues_(n, 0) {}

  // Blocks while other workers may still requeue; nullopt when all done.
  std::optional<std::size_t> pop() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return !pending_.empty() || in_flight_ == 0; });
    if (pending_.empty()) return std::nullopt;
    const auto i = pending_.front();
    pending_.pop_front();
    ++in_flight_;
    return i;
  }

  void done(std::size_t i, bool requeue) {
    {
      std::lock_guard lock(mu_);
      --in_flight_;
      if (requeue) {
        ++requeues_[i];
        pending_.push_back(i);
      }
    }
    cv_.notify_all();
  }

  Budget& budget(std::size_t i) { return budgets_[i]; }
  std::size_t requeues(std::size_t i) const {
    std::lock_guard lock(mu_);
    return requeues_[i];
  }

 private:
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::size_t> pending_;
  std::vector<Budget> budgets_;
  std::vector<std::size_t> requeues_;
  std::size_t in_flight_ = 0;
};

inline Rng sample_rng(std::uint64_t seed, std::size_t index, std::size_t requeue) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(requeue)};
  return Rng(seq);
}

struct SampleState {
  bool detected = false;
  std::size_t attempts = 0;
  std::size_t minimization_scans = 0;
  std::size_t requeues = 0;
  std::optional<MinimizedTrace> evasive;  // verified and validated
  std::vector<AppliedAction> trace;
  std::vector<std::string> violations;
};

struct CampaignRun {
  CampaignStats stats;
  std::vector<RawBinary> samples;  // parseable inputs, in order
  std::vector<SampleState> states;
  ArmPool pool;
};

// Runs the attack over in-memory samples. Does not touch the filesystem.
inline CampaignRun run_attack(std::vector<RawBinary> samples, const CampaignConfig& cfg, const OracleGateway& gateway,
                              const ContentPool& content, const NameList& names) {
  cfg.check();
  CampaignRun run;
  run.samples = std::move(samples);
  run.states.resize(run.samples.size());
  run.pool = ArmPool::init(cfg.kinds, cfg.seed);
  run.stats.oracle = to_string(gateway.spec());
  run.stats.samples_total = run.samples.size();

  for (std::size_t i = 0; i < run.samples.size(); ++i) {
    run.states[i].detected = gateway.classify_unbudgeted(run.samples[i].bytes()) == Label::Malicious;
    run.stats.N_d += run.states[i].detected;
  }
  if (run.stats.N_d == 0) throw NoDetectedSamples();

  std::vector<std::size_t> detected;
  for (std::size_t i = 0; i < run.samples.size(); ++i)
    if (run.states[i].detected) detected.push_back(i);
  WorkQueue queue(run.samples.size(), cfg.max_attempts, detected);
  AttackContext proto{gateway, run.pool, content, names, cfg.policy, cfg.minimize, cfg.action_config,
                     cfg.validate};

  std::mutex err_mu;
  std::exception_ptr first_error;
  auto worker = [&] {
    AttackContext ctx = proto;
    while (auto i = queue.pop()) {
      bool requeue = false;
      try {
        auto& st = run.states[*i];
        auto rng = sample_rng(cfg.seed, *i, queue.requeues(*i));
        auto res = run_sample(run.samples[*i], ctx, queue.budget(*i), rng);
        st.attempts += res.attempts;
        st.minimization_scans += res.minimization_scans;
        st.trace = std::move(res.trace);
        if (res.outcome == SampleOutcome::Evaded) {
          st.evasive = std::move(res.minimized);
        } else if (res.outcome == SampleOutcome::ValidationFailed) {
          st.violations.push_back(*res.violation);
          cfg.warn(run.samples[*i].origin_id() + ": " + *res.violation);
          requeue = cfg.requeue_on_validation_failure && !queue.budget(*i).exhausted();
        }
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!first_error) first_error = std::current_exception();
      }
      queue.done(*i, requeue);
    }
  };
  if (cfg.workers == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < cfg.workers; ++w) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);

  auto& s = run.stats;
  s.byte_change_histogram = empty_byte_histogram();
  s.cause_histogram = empty_cause_histogram();
  for (std::size_t i = 0; i < run.samples.size(); ++i) {
    auto& st = run.states[i];
    st.requeues = queue.requeues(i);
    SampleRecord rec;
    rec.sample_id = run.samples[i].origin_id();
    rec.detected = st.detected;
    rec.evaded = st.evasive.has_value();
    rec.attempts = st.attempts;
    rec.minimization_scans = st.minimization_scans;
    rec.requeues = st.requeues;
    s.generation_scans += st.attempts;
    s.minimization_scans += st.minimization_scans;
    s.requeues += st.requeues;
    if (st.evasive) {
      ++s.N_e;
      s.attempts_per_evasion.push_back(st.attempts);
      rec.bytes_changed = st.evasive->bytes_changed;
      ++s.byte_change_histogram[byte_bucket(rec.bytes_changed)];
      for (const auto& a : st.evasive->actions()) rec.minimized_actions.emplace_back(action_name(a.kind));
      for (auto f : st.evasive->cause_set().to_vector()) {
        ++s.cause_histogram[f];
        rec.causes.emplace_back(feature_name(f));
      }
    }
    s.samples.push_back(std::move(rec));
  }
  s.R_e = evasion_rate(s.N_e, s.N_d);
  s.per_arm = arm_rows(run.pool.snapshot());
  return run;
}

struct GeneratedAe {
  std::string sample_id;
  std::size_t oracle = 0;  // index of the generating oracle
  Bytes bytes;
};

// cell (a, b): share of AEs generated against a that b labels Benign.
inline TransferMatrix transfer_matrix(const std::vector<GeneratedAe>& aes, const std::vector<ClassifierPtr>& oracles,
                                      std::vector<std::string> names = {}) {
  const auto n = oracles.size();
  TransferMatrix t;
  if (names.empty())
    for (const auto& o : oracles) names.push_back(o->describe());
  t.oracles = std::move(names);
  t.ae_counts.assign(n, 0);
  std::vector<std::vector<std::size_t>> benign(n, std::vector<std::size_t>(n, 0));
  for (const auto& ae : aes) {
    if (ae.oracle >= n) throw Error("AE '" + ae.sample_id + "' has no generating oracle");
    ++t.ae_counts[ae.oracle];
    for (std::size_t b = 0; b < n; ++b) benign[ae.oracle][b] += oracles[b]->classify(ae.bytes) == Label::Benign;
  }
  t.rate.assign(n, std::vector<double>(n, std::numeric_limits<double>::quiet_NaN()));
  for (std::size_t a = 0; a < n; ++a) {
    if (t.ae_counts[a] == 0) continue;
    for (std::size_t b = 0; b < n; ++b)
      t.rate[a][b] = static_cast<double>(benign[a][b]) / static_cast<double>(t.ae_counts[a]);
  }
  return t;
}

inline TransferMatrix transfer_matrix(const std::vector<GeneratedAe>& aes, const std::vector<OracleSpec>& specs) {
  std::vector<ClassifierPtr> oracles;
  std::vector<std::string> names;
  for (const auto& s : specs) {
    oracles.push_back(make_classifier(s));
    names.push_back(to_string(s));
  }
  return transfer_matrix(aes, oracles, std::move(names));
}

// Reads samples_dir, runs the attack and writes every output under output_dir:
// ae/<id>, traces/<id>.json, minimize/<id>.json and the report files.
inline CampaignStats run_campaign(const CampaignConfig& cfg) {
  namespace fs = std::filesystem;
  cfg.check();
  OracleGateway gateway(cfg.oracle);
  if (!gateway.healthy()) throw OracleUnhealthy(to_string(cfg.oracle));

  if (!fs::is_directory(cfg.samples_dir)) throw IoError("samples dir '" + cfg.samples_dir.string() + "' not found");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(cfg.samples_dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw InvalidConfig("samples dir '" + cfg.samples_dir.string() + "' is empty");

  std::vector<RawBinary> samples;
  std::vector<fs::path> paths;
  std::size_t malformed = 0;
  for (const auto& f : files) {
    auto bytes = detail::read_bytes(f);
    try {
      if (bytes.empty()) throw MalformedPe("truncated");
      (void)ParsedPe::parse(ByteView(bytes));
    } catch (const MalformedPe& e) {
      cfg.warn("skipping " + f.filename().string() + ": " + e.what());
      ++malformed;
      continue;
    }
    samples.emplace_back(std::move(bytes), f.filename().string());
    paths.push_back(fs::absolute(f));
  }
  if (samples.empty()) throw NoDetectedSamples();

  const auto content = ContentPool::load(cfg.content_pool_dir);
  const auto names = cfg.name_list_path.empty() ? NameList() : NameList::load(cfg.name_list_path.string());
  auto run = run_attack(std::move(samples), cfg, gateway, content, names);
  run.stats.samples_total += malformed;
  run.stats.samples_malformed = malformed;

  std::vector<GeneratedAe> aes;
  for (std::size_t i = 0; i < run.samples.size(); ++i)
    if (const auto& e = run.states[i].evasive) {
      const auto b = e->final_sample->bytes();
      aes.push_back({run.samples[i].origin_id(), 0, Bytes(b.begin(), b.end())});
    }
  std::vector<OracleSpec> specs{cfg.oracle};
  specs.insert(specs.end(), cfg.transfer_oracles.begin(), cfg.transfer_oracles.end());
  const auto transfer = transfer_matrix(aes, specs);

  if (!cfg.output_dir.empty()) {
    const auto& out = cfg.output_dir;
    for (const char* sub : {"ae", "traces", "minimize"}) fs::create_directories(out / sub);
    for (std::size_t i = 0; i < run.samples.size(); ++i) {
      const auto& st = run.states[i];
      const auto& id = run.samples[i].origin_id();
      if (!st.trace.empty()) {
        const Trace t{run.samples[i], st.trace, run.stats.oracle};
        detail::write_file(out / "traces" / (id + ".json"), trace_to_json(t, paths[i].string()).dump(2) + "\n");
      }
      if (st.evasive) {
        const auto b = st.evasive->final_sample->bytes();
        detail::write_file(out / "ae" / id, std::string_view(reinterpret_cast<const char*>(b.data()), b.size()));
        detail::write_file(out / "minimize" / (id + ".json"), minimization_report(*st.evasive, id).dump(2) + "\n");
      }
    }
    render_reports(run.stats, transfer, out);
  }
  return run.stats;
}

}  // namespace mabpe
