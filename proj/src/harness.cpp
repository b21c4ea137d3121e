#include "sclab/harness.hpp"

#include <atomic>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include <fmt/chrono.h>
#include <fmt/format.h>

#include "sclab/errors.hpp"
#include "sclab/mitigation.hpp"

namespace sclab {

namespace fs = std::filesystem;

namespace {

std::string now_iso() {
  const auto now = std::chrono::system_clock::now();
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()) % 1000;
  return fmt::format("{:%Y-%m-%dT%H:%M:%S}.{:03d}Z", fmt::gmtime(std::chrono::system_clock::to_time_t(now)),
                     static_cast<int>(ms.count()));
}

nlohmann::json stage_to_json(const StageOutput& s) {
  nlohmann::json j{{"prompt", s.prompt}, {"text", s.text}, {"tokens", s.tokens}};
  if (s.label) j["label"] = to_string(*s.label);
  return j;
}

StageOutput stage_from_json(const nlohmann::json& j) {
  StageOutput s;
  s.prompt = j.at("prompt").get<std::string>();
  s.text = j.at("text").get<std::string>();
  if (j.contains("label")) s.label = label_from_string(j["label"].get<std::string>());
  s.tokens = j.value("tokens", std::vector<TokenLogprob>{});
  return s;
}

const TemplateSet& templates_of(const RunOptions& options) {
  return options.templates ? *options.templates : TemplateSet::builtin();
}

// Other-answer binding for V3/V5: the opposite of the first answer. An ambiguous
// first answer gets the opposite of the gold label.
Bindings bindings_for(const QuestionRecord& q, const std::optional<StageOutput>& initial) {
  Bindings b;
  b.question = q.question;
  if (initial && initial->label && *initial->label != AnswerLabel::kAmbiguous) {
    b.other_answer = opposite_answer(*initial->label);
  } else {
    b.other_answer = canonical_answer(!q.gold);
  }
  return b;
}

// Applies the question-repeating modifier to the last (refinement) user turn.
Conversation with_modifiers(Conversation conv, const QuestionRecord& q, const RunOptions& options) {
  if (options.question_repeating) {
    conv.messages.back().content = question_repeating(conv.messages.back().content, q.question);
  }
  return conv;
}

StageOutput ask(Gateway& gateway, const Conversation& conv, const RunOptions& options, bool parse,
                const TemplateSet& templates) {
  Completion c = gateway.complete(conv, options.params);
  StageOutput out;
  out.prompt = conv.messages.back().content;
  out.text = std::move(c.text);
  out.tokens = std::move(c.tokens);
  if (parse) out.label = parse_yes_no(out.text, templates);
  return out;
}

}  // namespace

std::string record_key(std::string_view question_id, VariantId variant) {
  return fmt::format("{}\x1f{}", question_id, to_string(variant));
}

std::string RunRecord::key() const { return record_key(question_id, variant); }

Conversation RunRecord::refinement_context() const {
  if (!initial || !refinement) {
    throw Error(ErrorKind::kPrecondition, "episode " + question_id + " is incomplete");
  }
  Conversation c;
  c.messages.push_back({Role::kUser, initial->prompt});
  c.messages.push_back({Role::kAssistant, initial->text});
  if (feedback) {
    c.messages.push_back({Role::kUser, feedback->prompt});
    c.messages.push_back({Role::kAssistant, feedback->text});
  }
  c.messages.push_back({Role::kUser, refinement->prompt});
  return c;
}

nlohmann::json to_json(const RunRecord& r) {
  nlohmann::json j{
      {"question_id", r.question_id},
      {"dataset_index", r.dataset_index},
      {"variant", to_string(r.variant)},
      {"gold", r.gold},
      {"question_repeating", r.question_repeating},
      {"model", r.model},
  };
  if (r.initial) j["initial"] = stage_to_json(*r.initial);
  if (r.feedback) j["feedback"] = stage_to_json(*r.feedback);
  if (r.refinement) j["refinement"] = stage_to_json(*r.refinement);
  if (r.failure) j["failure"] = *r.failure;
  return j;
}

RunRecord record_from_json(const nlohmann::json& j) {
  RunRecord r;
  r.question_id = j.at("question_id").get<std::string>();
  r.dataset_index = j.value("dataset_index", std::size_t{0});
  r.variant = variant_from_string(j.at("variant").get<std::string>());
  r.gold = j.at("gold").get<bool>();
  r.question_repeating = j.value("question_repeating", false);
  r.model = j.value("model", std::string());
  if (j.contains("initial")) r.initial = stage_from_json(j["initial"]);
  if (j.contains("feedback")) r.feedback = stage_from_json(j["feedback"]);
  if (j.contains("refinement")) r.refinement = stage_from_json(j["refinement"]);
  if (j.contains("failure")) r.failure = j["failure"].get<std::string>();
  return r;
}

std::size_t count_changes(const std::vector<AnswerLabel>& labels) {
  std::size_t n = 0;
  for (std::size_t i = 1; i < labels.size(); ++i) n += labels[i] != labels[i - 1] ? 1 : 0;
  return n;
}

nlohmann::json to_json(const WaverTrace& t) {
  nlohmann::json labels = nlohmann::json::array();
  for (AnswerLabel l : t.labels) labels.push_back(to_string(l));
  nlohmann::json j{{"question_id", t.question_id},
                   {"labels", labels},
                   {"responses", t.responses},
                   {"change_count", t.change_count}};
  if (t.failure) j["failure"] = *t.failure;
  return j;
}

WaverTrace waver_from_json(const nlohmann::json& j) {
  WaverTrace t;
  t.question_id = j.at("question_id").get<std::string>();
  for (const auto& l : j.at("labels")) t.labels.push_back(label_from_string(l.get<std::string>()));
  t.responses = j.value("responses", std::vector<std::string>{});
  t.change_count = count_changes(t.labels);
  if (j.contains("failure")) t.failure = j["failure"].get<std::string>();
  return t;
}

static RunRecord run_sample_from(const QuestionRecord& q, VariantId variant, Gateway& gateway, const RunOptions& options,
                          const StageCallback& on_stage, const RunRecord* prior) {
  const TemplateSet& templates = templates_of(options);
  const PromptVariant pv = templates.variant(variant);

  RunRecord rec;
  rec.question_id = q.id;
  rec.variant = variant;
  rec.gold = q.gold;
  rec.question_repeating = options.question_repeating;
  rec.model = gateway.model_id();
  // Stages already answered in a persisted partial record are reused, not re-requested.
  if (prior != nullptr && prior->question_repeating == options.question_repeating) {
    rec.initial = prior->initial;
    rec.feedback = pv.has_feedback() ? prior->feedback : std::nullopt;
    rec.timestamps = prior->timestamps;
  }

  auto persist = [&](std::string_view stage) {
    rec.timestamps[std::string(stage)] = now_iso();
    if (on_stage) on_stage(rec);
  };

  Stage current = Stage::kInitial;
  try {
    Conversation conv = build_turns(q, pv, Stage::kInitial, {}, {}, templates);
    if (!rec.initial) {
      rec.initial = ask(gateway, conv, options, true, templates);
      persist("initial");
    }
    conv = conv.with({Role::kAssistant, rec.initial->text});

    const Bindings bindings = bindings_for(q, rec.initial);
    if (pv.has_feedback()) {
      current = Stage::kFeedback;
      conv = build_turns(q, pv, Stage::kFeedback, conv, bindings, templates);
      if (!rec.feedback) {
        rec.feedback = ask(gateway, conv, options, false, templates);
        persist("feedback");
      }
      conv = conv.with({Role::kAssistant, rec.feedback->text});
    }

    current = Stage::kRefinement;
    conv = with_modifiers(build_turns(q, pv, Stage::kRefinement, conv, bindings, templates), q, options);
    rec.refinement = ask(gateway, conv, options, true, templates);
    persist("refinement");
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::kTransport && e.kind() != ErrorKind::kRuleMiss &&
        e.kind() != ErrorKind::kProviderRefusal) {
      throw;
    }
    rec.failure = fmt::format("{}: {}", to_string(current), e.what());
    if (on_stage) on_stage(rec);
  }
  return rec;
}

RunRecord run_sample(const QuestionRecord& q, VariantId variant, Gateway& gateway, const RunOptions& options,
                     const StageCallback& on_stage) {
  return run_sample_from(q, variant, gateway, options, on_stage, nullptr);
}

WaverTrace run_multi_round(const QuestionRecord& q, Gateway& gateway, int rounds, VariantId variant,
                           const RunOptions& options) {
  if (rounds < 2) throw Error(ErrorKind::kPrecondition, "multi-round runs need at least 2 rounds");
  const TemplateSet& templates = templates_of(options);
  const PromptVariant pv = templates.variant(variant);
  if (pv.has_feedback()) {
    throw Error(ErrorKind::kPrecondition, "multi-round runs use a refinement-only variant (V1-V3)");
  }

  WaverTrace trace;
  trace.question_id = q.id;
  Stage current = Stage::kInitial;
  try {
    Conversation conv = build_turns(q, pv, Stage::kInitial, {}, {}, templates);
    StageOutput first = ask(gateway, conv, options, true, templates);
    trace.labels.push_back(*first.label);
    trace.responses.push_back(first.text);
    conv = conv.with({Role::kAssistant, first.text});
    const Bindings bindings = bindings_for(q, first);

    current = Stage::kRefinement;
    for (int round = 1; round < rounds; ++round) {
      conv = with_modifiers(build_turns(q, pv, Stage::kRefinement, conv, bindings, templates), q, options);
      StageOutput out = ask(gateway, conv, options, true, templates);
      trace.labels.push_back(*out.label);
      trace.responses.push_back(out.text);
      conv = conv.with({Role::kAssistant, out.text});
    }
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::kTransport && e.kind() != ErrorKind::kRuleMiss &&
        e.kind() != ErrorKind::kProviderRefusal) {
      throw;
    }
    trace.failure = fmt::format("{} round {}: {}", to_string(current), trace.labels.size(), e.what());
  }
  trace.change_count = count_changes(trace.labels);
  return trace;
}

namespace {

// Runs `task(i)` for i in [0, n) on up to `workers` threads.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& task) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex err_mu;
  auto loop = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        task(i);
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!first_error) first_error = std::current_exception();
        next = n;
      }
    }
  };
  const std::size_t threads = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, workers)));
  if (threads <= 1) {
    loop();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(loop);
  }
  if (first_error) std::rethrow_exception(first_error);
}

int worker_count(const RunOptions& options, const Gateway& gateway) {
  return options.workers > 0 ? options.workers : gateway.max_concurrency();
}

}  // namespace

std::vector<WaverTrace> run_multi_round_dataset(const Dataset& dataset, Gateway& gateway, int rounds,
                                                VariantId variant, const RunOptions& options) {
  std::vector<WaverTrace> traces(dataset.questions.size());
  parallel_for(dataset.questions.size(), worker_count(options, gateway), [&](std::size_t i) {
    traces[i] = run_multi_round(dataset.questions[i], gateway, rounds, variant, options);
  });
  return traces;
}

std::size_t RunSet::failed_count() const {
  std::size_t n = 0;
  for (const auto& r : records) n += r.complete() ? 0 : 1;
  return n;
}

RunSetStore::RunSetStore(std::string dir, nlohmann::json config, std::string dataset_digest, bool resume)
    : dir_(std::move(dir)) {
  std::error_code ec;
  fs::create_directories(dir_, ec);
  if (ec) throw Error(ErrorKind::kIo, "cannot create run directory '" + dir_ + "': " + ec.message());

  const fs::path cfg_path = fs::path(dir_) / kConfigFile;
  const fs::path rec_path = fs::path(dir_) / kRecordsFile;
  const fs::path ts_path = fs::path(dir_) / kTimestampsFile;

  if (resume && fs::exists(cfg_path)) {
    const auto stored = nlohmann::json::parse(read_file(cfg_path.string()), nullptr, false);
    if (stored.is_discarded()) throw Error(ErrorKind::kConfig, "corrupt " + cfg_path.string());
    if (stored.value("dataset_digest", std::string()) != dataset_digest) {
      throw Error(ErrorKind::kConfig, "dataset changed since the run in '" + dir_ + "' started");
    }
  }
  if (resume && fs::exists(rec_path)) {
    std::ifstream in(rec_path);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line, nullptr, false);
      // A torn final line from an interrupted run is ignored.
      if (j.is_discarded()) continue;
      RunRecord r = record_from_json(j);
      existing_[r.key()] = std::move(r);
    }
    if (fs::exists(ts_path)) {
      std::ifstream ts(ts_path);
      while (std::getline(ts, line)) {
        const auto j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) continue;
        auto it = existing_.find(j.value("key", std::string()));
        if (it != existing_.end()) it->second.timestamps = j.at("timestamps").get<std::map<std::string, std::string>>();
      }
    }
  } else {
    fs::remove(rec_path, ec);
    fs::remove(ts_path, ec);
  }

  nlohmann::json sidecar{{"config", std::move(config)}, {"dataset_digest", std::move(dataset_digest)}};
  std::ofstream out(cfg_path, std::ios::trunc);
  out << sidecar.dump(2) << '\n';
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + cfg_path.string());
}

void RunSetStore::append(const RunRecord& record) {
  std::lock_guard lock(mu_);
  {
    std::ofstream out(fs::path(dir_) / kRecordsFile, std::ios::app);
    out << to_json(record).dump() << '\n';
    if (!out) throw Error(ErrorKind::kIo, "cannot append to run store in '" + dir_ + "'");
  }
  {
    std::ofstream ts(fs::path(dir_) / kTimestampsFile, std::ios::app);
    ts << nlohmann::json{{"key", record.key()}, {"timestamps", record.timestamps}}.dump() << '\n';
  }
  existing_[record.key()] = record;
}

void RunSetStore::finalize(const RunSet& runset) {
  std::lock_guard lock(mu_);
  const fs::path rec_path = fs::path(dir_) / kRecordsFile;
  const fs::path ts_path = fs::path(dir_) / kTimestampsFile;
  const fs::path tmp = rec_path.string() + ".tmp";
  const fs::path ts_tmp = ts_path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    std::ofstream ts(ts_tmp, std::ios::trunc);
    for (const RunRecord& r : runset.records) {
      out << to_json(r).dump() << '\n';
      ts << nlohmann::json{{"key", r.key()}, {"timestamps", r.timestamps}}.dump() << '\n';
    }
    if (!out || !ts) throw Error(ErrorKind::kIo, "cannot write run store in '" + dir_ + "'");
  }
  fs::rename(tmp, rec_path);
  fs::rename(ts_tmp, ts_path);
}

RunSet load_runset(const std::string& dir) {
  RunSet rs;
  const fs::path cfg_path = fs::path(dir) / RunSetStore::kConfigFile;
  const fs::path rec_path = fs::path(dir) / RunSetStore::kRecordsFile;
  if (fs::exists(cfg_path)) {
    const auto sidecar = nlohmann::json::parse(read_file(cfg_path.string()), nullptr, false);
    if (!sidecar.is_discarded()) {
      rs.config = sidecar.value("config", nlohmann::json::object());
      rs.dataset_digest = sidecar.value("dataset_digest", std::string());
    }
  }
  // Accept either a run directory or a bare records file.
  const fs::path records = fs::is_directory(dir) ? rec_path : fs::path(dir);
  std::ifstream in(records);
  if (!in) throw Error(ErrorKind::kIo, "cannot open run records '" + records.string() + "'");
  std::map<std::string, std::size_t> position;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) {
      throw Error(ErrorKind::kParse, fmt::format("{}:{}: not JSON", records.string(), line_no));
    }
    RunRecord r = record_from_json(j);
    // Later lines supersede earlier partial states of the same record.
    auto [it, inserted] = position.emplace(r.key(), rs.records.size());
    if (inserted) {
      rs.records.push_back(std::move(r));
    } else {
      rs.records[it->second] = std::move(r);
    }
  }
  return rs;
}

RunSet run_dataset(const Dataset& dataset, const std::vector<VariantId>& variants, Gateway& gateway,
                   const RunOptions& options, RunSetStore* store) {
  if (variants.empty()) throw Error(ErrorKind::kConfig, "no prompt variants selected");
  {
    std::set<std::string> ids;
    for (const auto& q : dataset.questions) {
      if (q.question.empty()) throw Error(ErrorKind::kConfig, "question '" + q.id + "' is empty");
      if (!ids.insert(q.id).second) throw Error(ErrorKind::kConfig, "duplicate question id '" + q.id + "'");
    }
    std::set<VariantId> seen;
    for (VariantId v : variants) {
      if (!seen.insert(v).second) throw Error(ErrorKind::kConfig, "variant listed twice");
    }
  }

  RunSet rs;
  rs.dataset_digest = dataset.digest;
  struct Task {
    std::size_t index;
    VariantId variant;
  };
  std::vector<Task> tasks;
  for (std::size_t i = 0; i < dataset.questions.size(); ++i) {
    for (VariantId v : variants) tasks.push_back({i, v});
  }
  rs.records.resize(tasks.size());

  std::vector<std::size_t> pending;
  std::vector<std::optional<RunRecord>> priors(tasks.size());
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const auto& q = dataset.questions[tasks[t].index];
    if (store != nullptr) {
      auto it = store->existing().find(record_key(q.id, tasks[t].variant));
      if (it != store->existing().end() && it->second.complete() &&
          it->second.question_repeating == options.question_repeating) {
        rs.records[t] = it->second;
        rs.records[t].dataset_index = tasks[t].index;
        continue;
      }
      if (it != store->existing().end()) priors[t] = it->second;
    }
    pending.push_back(t);
  }

  parallel_for(pending.size(), worker_count(options, gateway), [&](std::size_t p) {
    const Task& task = tasks[pending[p]];
    const auto& q = dataset.questions[task.index];
    const RunRecord* prior = priors[pending[p]] ? &*priors[pending[p]] : nullptr;
    StageCallback persist;
    if (store != nullptr) {
      persist = [&, idx = task.index](const RunRecord& partial) {
        RunRecord r = partial;
        r.dataset_index = idx;
        store->append(r);
      };
    }
    RunRecord r = run_sample_from(q, task.variant, gateway, options, persist, prior);
    r.dataset_index = task.index;
    rs.records[pending[p]] = std::move(r);
  });

  if (store != nullptr) {
    rs.config = nlohmann::json::parse(read_file((fs::path(store->dir()) / RunSetStore::kConfigFile).string()))
                    .value("config", nlohmann::json::object());
    store->finalize(rs);
  }
  return rs;
}

}  // namespace sclab
