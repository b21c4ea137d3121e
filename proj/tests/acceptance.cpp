// Acceptance suite: one PASS/FAIL line per criterion. Exit status is nonzero
// when any gating criterion fails.

#include <array>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <random>

#include <fmt/format.h>

#include "sclab/bias.hpp"
#include "sclab/config.hpp"
#include "sclab/metrics.hpp"
#include "sclab/mitigation.hpp"
#include "sclab/pact.hpp"
#include "sclab/probe.hpp"
#include "sclab/report.hpp"
#include "support.hpp"

using namespace sclab;
namespace ts = testsupport;

namespace {

struct Check {
  bool ok = true;
  std::string detail;

  void require(bool cond, const std::string& what) {
    if (!cond && ok) {
      ok = false;
      detail = what;
    }
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::pair<std::size_t, std::size_t> locate(const Conversation& c, std::size_t pos) {
  std::size_t start = 0;
  for (std::size_t m = 0; m < c.messages.size(); ++m) {
    const std::size_t end = start + c.messages[m].content.size();
    if (pos <= end) return {m, pos - start};
    start = end + 1;
  }
  throw std::out_of_range("position outside prompt");
}

Check pact_oracle() {
  Check c;
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::size_t values = 0;
  for (Granularity gran : {Granularity::kSequence, Granularity::kWord}) {
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
      // Word level uses a short episode so the map stays within 8 segments.
      RunRecord ep = ts::episode("q", gran == Granularity::kWord ? "Big?" : "Is human a kind of animals?", true,
                                 "Yes", "No");
      if (gran == Granularity::kWord) {
        ep.initial->prompt = "Is it big?";
        ep.refinement->prompt = "Are you sure?";
      }
      const Conversation x = ep.refinement_context();
      const auto segs = segment_prompt(ep, gran);
      c.require(segs.size() <= 8, fmt::format("{} segments", segs.size()));
      std::mt19937_64 rng(seed);
      std::uniform_real_distribution<double> u(0.01, 0.99);
      ts::RuleTable table;
      auto put = [&](const Conversation& conv) {
        const double p = u(rng);
        table[ts::oracle_fingerprint(conv)] = {{"Yes", p}, {"No", 1.0 - p}};
      };
      put(x);
      std::vector<Conversation> ablated;
      for (const Segment& s : segs) {
        const auto [m, b] = locate(x, s.span.begin);
        ablated.push_back(ts::oracle_ablate(x, m, b, b + s.span.size()));
        put(ablated.back());
      }
      Gateway g(std::make_shared<ScriptedModel>(ts::model_from(table)), 1, RetryPolicy{});
      const AttributionMap map = attribution_map(ep, gran, g);
      c.require(map.entries.size() == segs.size(), "entry count");
      const double full = std::log(table.at(ts::oracle_fingerprint(x)).at("No"));
      for (std::size_t i = 0; i < map.entries.size(); ++i) {
        const double want = std::log(table.at(ts::oracle_fingerprint(ablated[i])).at("No")) - full;
        worst = std::max(worst, std::abs(map.entries[i].pact - want));
        ++values;
      }
    }
  }
  const double secs = seconds_since(t0);
  c.require(worst <= 1e-12, fmt::format("max |error| {:.3g}", worst));
  c.require(secs < 5.0, fmt::format("took {:.2f} s", secs));
  if (c.ok) c.detail = fmt::format("{} values, max |error| {:.3g}, {:.3f} s", values, worst, secs);
  return c;
}

Check multi_token_lp() {
  Check c;
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  double worst = 0.0;
  // The stated example first: P(A|x)=0.5, P(B|x,A)=0.25.
  {
    ts::RuleTable table;
    Conversation x;
    x.messages.push_back({Role::kUser, "x"});
    table[ts::oracle_fingerprint(x)] = {{"A", 0.5}, {"C", 0.5}};
    Conversation xa = x;
    xa.messages.push_back({Role::kAssistant, "A[SEP]"});
    table[ts::oracle_fingerprint(xa)] = {{"B", 0.25}, {"C", 0.75}};
    Gateway g(std::make_shared<ScriptedModel>(ts::model_from(table)), 1, RetryPolicy{});
    const double got = lp_of_output(x, {"A", "B"}, g).value;
    worst = std::max(worst, std::abs(got - (std::log(0.5) + std::log(0.25)) / 2.0));
  }
  for (int iter = 0; iter < 300; ++iter) {
    ts::RuleTable table;
    Conversation x;
    x.messages.push_back({Role::kUser, fmt::format("prompt {}", iter)});
    const std::size_t len = 2 + rng() % 4;
    std::vector<std::string> y;
    std::string partial;
    for (std::size_t k = 0; k < len; ++k) {
      y.push_back(fmt::format("t{}", rng() % 3));
      Conversation ctx = x;
      if (k > 0) ctx.messages.push_back({Role::kAssistant, partial + "[SEP]"});
      const double p = u(rng);
      table[ts::oracle_fingerprint(ctx)] = {{y[k], p}, {"other", 1.0 - p}};
      partial += y[k];
    }
    Gateway g(std::make_shared<ScriptedModel>(ts::model_from(table)), 1, RetryPolicy{});
    worst = std::max(worst, std::abs(lp_of_output(x, y, g).value - ts::oracle_lp(table, x, y)));
  }
  c.require(worst <= 1e-12, fmt::format("max |error| {:.3g}", worst));
  if (c.ok) c.detail = fmt::format("301 outputs, max |error| {:.3g}", worst);
  return c;
}

Check metrics_exactness() {
  Check c;
  RunSet rs;
  // (gold, first, second): 5 cc, 2 ci, 1 ic, 2 ii
  const std::vector<std::array<const char*, 3>> rows = {
      {"Yes", "Yes", "Yes"}, {"No", "No", "No"},  {"Yes", "Yes", "Yes"}, {"No", "No", "No"},  {"Yes", "Yes", "Yes"},
      {"Yes", "Yes", "No"},  {"No", "No", "Yes"}, {"No", "Yes", "No"},   {"Yes", "No", "No"}, {"No", "Yes", "Yes"}};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    rs.records.push_back(ts::episode(fmt::format("m{}", i), "Q?", std::string(rows[i][0]) == "Yes", rows[i][1],
                                     rows[i][2], i));
  }
  const MetricsReport r = report(rs);
  c.require(r.acc0 == 0.7, fmt::format("acc0 {}", r.acc0));
  c.require(r.acc1 == 0.6, fmt::format("acc1 {}", r.acc1));
  c.require(r.c2i && *r.c2i == 2.0 / 7.0, "c2i");
  c.require(r.i2c && *r.i2c == 1.0 / 3.0, "i2c");

  std::mt19937_64 rng(2024);
  const char* answers[] = {"Yes", "No", "Unsure"};
  for (int iter = 0; iter < 1000 && c.ok; ++iter) {
    RunSet random;
    const int n = 1 + static_cast<int>(rng() % 50);
    for (int i = 0; i < n; ++i) {
      random.records.push_back(ts::episode(fmt::format("r{}", i), "Q?", rng() % 2 == 0, answers[rng() % 3],
                                           answers[rng() % 3], i));
    }
    const MetricsReport m = report(random);
    c.require(std::abs(m.acc0 - (m.acc1 + m.delta_acc)) <= 1e-12, fmt::format("case {}", iter));
  }
  if (c.ok) c.detail = "acc0=0.7 acc1=0.6 c2i=2/7 i2c=1/3; 1000 random run sets";
  return c;
}

Check wavering() {
  Check c;
  std::mt19937_64 rng(8);
  for (int iter = 0; iter < 1000 && c.ok; ++iter) {
    std::vector<AnswerLabel> labels(rng() % 25);
    for (auto& l : labels) l = static_cast<AnswerLabel>(rng() % 3);
    std::size_t recount = 0;
    for (std::size_t i = 0; i + 1 < labels.size(); ++i) recount += labels[i] != labels[i + 1];
    c.require(count_changes(labels) == recount, fmt::format("sequence {}", iter));
  }
  std::vector<WaverTrace> traces;
  for (std::size_t changes : {0, 7, 7, 8}) {
    WaverTrace t;
    AnswerLabel cur = AnswerLabel::kYes;
    for (std::size_t k = 0; k < 10; ++k) {
      if (k > 0 && k <= changes) cur = cur == AnswerLabel::kYes ? AnswerLabel::kNo : AnswerLabel::kYes;
      t.labels.push_back(cur);
    }
    t.change_count = count_changes(t.labels);
    traces.push_back(t);
  }
  const double share = waver_distribution(traces).share_changing_more_than(6);
  c.require(share == 0.75, fmt::format("share {}", share));
  if (c.ok) c.detail = "1000 recounts; share_changing_more_than(6) = 0.75";
  return c;
}

LayerTrace trace_of(const std::string& id, const std::vector<std::pair<double, double>>& scores) {
  LayerTrace t;
  t.sample_id = id;
  int layer = 15;
  for (const auto& [a, b] : scores) t.layers.push_back({layer++, a, b});
  return t;
}

Check jsd_properties() {
  Check c;
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 3.0);
  for (int iter = 0; iter < 1000 && c.ok; ++iter) {
    std::vector<LayerTrace> a, b;
    const std::size_t layers = 1 + rng() % 8;
    for (int s = 0; s < 3; ++s) {
      std::vector<std::pair<double, double>> sa, sb;
      for (std::size_t l = 0; l < layers; ++l) {
        sa.emplace_back(n(rng), n(rng));
        sb.push_back(rng() % 5 == 0 ? sa.back() : std::make_pair(n(rng), n(rng)));
      }
      a.push_back(trace_of(fmt::format("s{}", s), sa));
      b.push_back(trace_of(fmt::format("s{}", s), sb));
    }
    std::shuffle(b.begin(), b.end(), rng);
    const auto ab = js_divergence(a, b), ba = js_divergence(b, a);
    c.require(ab.mean_jsd == ba.mean_jsd, fmt::format("asymmetric at case {}", iter));
    for (std::size_t s = 0; s < ab.per_layer.size(); ++s) {
      for (std::size_t l = 0; l < ab.per_layer[s].size(); ++l) {
        const double v = ab.per_layer[s][l];
        c.require(v >= 0.0 && v <= 1.0, "out of range");
        const TwoClass p = softmax_normalizer(a[s].layers[l].cs_correct, a[s].layers[l].cs_incorrect);
        const auto& bl = std::find_if(b.begin(), b.end(), [&](const LayerTrace& t) { return t.sample_id == a[s].sample_id; })
                             ->layers[l];
        const TwoClass q = softmax_normalizer(bl.cs_correct, bl.cs_incorrect);
        const bool equal = p == q;
        c.require(equal ? v <= 1e-12 : v > 0.0, fmt::format("zero-iff-equal at case {}", iter));
      }
    }
  }
  auto kl = [](TwoClass p, TwoClass q) {
    double s = 0.0;
    for (int i = 0; i < 2; ++i) {
      if (p[i] > 0) s += p[i] * std::log2(p[i] / q[i]);
    }
    return s;
  };
  const double mixed = 0.5 * kl({1, 0}, {0.75, 0.25}) + 0.5 * kl({0.5, 0.5}, {0.75, 0.25});
  c.require(std::abs(js_divergence_bits({1, 0}, {1, 0})) <= 1e-9, "identical case");
  c.require(std::abs(js_divergence_bits({1, 0}, {0, 1}) - 1.0) <= 1e-9, "disjoint case");
  c.require(std::abs(js_divergence_bits({1, 0}, {0.5, 0.5}) - mixed) <= 1e-9, "mixed case");
  if (c.ok) c.detail = fmt::format("1000 paired trace sets; analytic 0, 1, {:.9f}", mixed);
  return c;
}

Check flip_frequency_check() {
  Check c;
  const double f = flip_frequency(trace_of("x", {{1, 0}, {2, 0}, {-1, 0}, {3, 0}}));
  c.require(f == 2.0 / 3.0, fmt::format("got {}", f));
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0.0, 2.0);
  std::uniform_real_distribution<double> k(0.001, 1000.0);
  for (int iter = 0; iter < 1000 && c.ok; ++iter) {
    std::vector<std::pair<double, double>> s(2 + rng() % 20), scaled;
    const double factor = k(rng);
    for (auto& [a, b] : s) {
      a = n(rng);
      b = rng() % 6 == 0 ? a : n(rng);
      scaled.emplace_back(a * factor, b * factor);
    }
    c.require(flip_frequency(trace_of("x", s)) == flip_frequency(trace_of("x", scaled)), fmt::format("case {}", iter));
  }
  if (c.ok) c.detail = "[+,+,-,+] -> 2/3; 1000 rescaled traces";
  return c;
}

Check mitigation() {
  Check c;
  const std::string repeated =
      question_repeating("Are you sure? Think and answer again.", "Is human a kind of animals?");
  c.require(repeated == "Are you sure? Think and answer again. Is human a kind of animals?", repeated);
  RunSet rs;
  GoldLookup gold;
  for (int i = 0; i < 20; ++i) {
    const bool g = i % 2 == 0;
    const bool flip = i < 12;
    const std::string right = g ? "Yes" : "No", wrong = g ? "No" : "Yes";
    const std::string id = fmt::format("q{:02d}", i);
    rs.records.push_back(ts::episode(id, fmt::format("Question {}?", i), g, right, flip ? wrong : right, i));
    gold[id] = g;
  }
  const SftDataset a = build_sft_dataset(rs, 10, gold);
  c.require(a.samples.size() == 10, "sample count");
  for (const auto& s : a.samples) {
    c.require(s.messages.size() == 4, "not 4-turn");
    c.require(parse_yes_no(s.messages.messages[1].content) == label_for(gold[s.question_id]) &&
                  parse_yes_no(s.messages.messages[3].content) == label_for(gold[s.question_id]),
              "answers not gold");
  }
  const std::string text = finetune_jsonl(a);
  const auto back = parse_finetune_jsonl(text);
  c.require(back.size() == 10, "round trip count");
  for (std::size_t i = 0; i < back.size() && c.ok; ++i) c.require(back[i].messages == a.samples[i].messages, "round trip");
  c.require(finetune_jsonl(build_sft_dataset(rs, 10, gold)) == text, "selection not deterministic");
  if (c.ok) c.detail = "example byte-exact; 10 of 12 flips exported and re-read";
  return c;
}

Check bias_analyzer() {
  Check c;
  auto counts = [&](const std::string& name, long long thinks, long long noop) {
    const AgentTrace t = parse_agent_log(ts::slurp(ts::fixture("bias/" + name)));
    const BiasFeatures f = bias_features(t);
    c.require(f.think_count == thinks && f.noop_loop_len == noop,
              fmt::format("{}: {} thinks, loop {}", name, f.think_count, f.noop_loop_len));
  };
  counts("pillow_initial.txt", 5, 0);
  counts("pillow_refinement.txt", 2, 2);

  const std::vector<BiasRecord> corpus = load_bias_corpus(ts::fixture("bias/corpus.jsonl"));
  std::istringstream in(ts::slurp(ts::fixture("bias/corpus.jsonl")));
  std::string line;
  while (std::getline(in, line) && c.ok) {
    const auto j = nlohmann::json::parse(line);
    const BiasFeatures f = bias_features(parse_agent_log(j["log"].get<std::string>()));
    c.require(f.think_count == j["expected"]["think_count"].get<long long>() &&
                  f.noop_loop_len == j["expected"]["noop_loop_len"].get<long long>(),
              "corpus counts differ for " + j["episode"].get<std::string>());
  }
  const BiasReport r = analyze_corpus(corpus);
  const double o = 100.0 * r.distribution.at(BiasPattern::kOverthinking);
  const double co = 100.0 * r.distribution.at(BiasPattern::kCognitiveOverload);
  const double p = 100.0 * r.distribution.at(BiasPattern::kPerfectionism);
  c.require(std::abs(o - 17.6) <= 10.0 && std::abs(co - 33.3) <= 10.0 && std::abs(p - 49.0) <= 10.0,
            fmt::format("distribution {:.1f}/{:.1f}/{:.1f}", o, co, p));
  if (c.ok) {
    c.detail = fmt::format("hand counts match; distribution {:.1f}/{:.1f}/{:.1f} over {} failures", o, co, p,
                           r.failures.size());
  }
  return c;
}

int shell(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Check end_to_end() {
  Check c;
  const auto t0 = std::chrono::steady_clock::now();
  const std::string cfg = ts::fixture("smoke/smoke_config.json");
  std::array<std::string, 2> dirs;
  for (int i = 0; i < 2; ++i) {
    dirs[i] = ts::temp_dir(fmt::format("e2e{}", i));
    const std::string base = fmt::format("{} --config {} --out {}", SCLAB_CLI, cfg, dirs[i]);
    c.require(shell(base + "/run run >/dev/null 2>&1") == 0, "run failed");
    c.require(shell(fmt::format("{}/report report {}/run >/dev/null 2>&1", base, dirs[i])) == 0, "report failed");
  }
  for (const char* f : {"run/runset.jsonl", "report/report.md", "report/report.json"}) {
    const std::string a = ts::slurp(dirs[0] + "/" + f);
    c.require(!a.empty() && a == ts::slurp(dirs[1] + "/" + f), std::string(f) + " differs");
  }
  const double secs = seconds_since(t0);
  c.require(secs < 30.0, fmt::format("took {:.1f} s", secs));
  if (c.ok) c.detail = fmt::format("run + report twice, byte-identical, {:.2f} s", secs);
  return c;
}

// Optional: a real endpoint named by SCLAB_LIVE_CONFIG.
Check live_workflow(bool& skipped) {
  Check c;
  const char* path = std::getenv("SCLAB_LIVE_CONFIG");
  if (path == nullptr) {
    skipped = true;
    c.detail = "set SCLAB_LIVE_CONFIG to a config with an http backend to run";
    return c;
  }
  LabConfig cfg = load_config(path);
  cfg.variants = {VariantId::kV1};
  cfg.validate();
  const Dataset d = load_dataset(cfg.dataset);
  c.require(d.questions.size() >= 200, "needs at least 200 questions");
  auto gateway = make_gateway(cfg.backend);
  RunOptions o;
  o.params = cfg.decoding;
  o.workers = cfg.concurrency;
  for (bool repeat : {false, true}) {
    o.question_repeating = repeat;
    const RunSet rs = run_dataset(d, cfg.variants, *gateway, o);
    c.require(rs.failed_count() == 0, fmt::format("{} failed episodes", rs.failed_count()));
    const MetricsReport m = report(rs);
    c.require(m.c2i.has_value() && m.i2c.has_value(), "a table cell is undefined");
  }
  if (c.ok) c.detail = "table cells populated with and without question repeating";
  return c;
}

}  // namespace

int main() {
  struct Item {
    const char* name;
    std::function<Check()> run;
  };
  const std::vector<Item> items = {
      {"pact-oracle-equivalence", pact_oracle},
      {"multi-token-lp", multi_token_lp},
      {"metrics-exactness", metrics_exactness},
      {"wavering", wavering},
      {"jsd-properties", jsd_properties},
      {"flip-frequency", flip_frequency_check},
      {"mitigation", mitigation},
      {"bias-analyzer", bias_analyzer},
      {"end-to-end-determinism", end_to_end},
  };
  int failures = 0;
  for (const auto& item : items) {
    Check c;
    try {
      c = item.run();
    } catch (const std::exception& e) {
      c.ok = false;
      c.detail = std::string("exception: ") + e.what();
    }
    failures += c.ok ? 0 : 1;
    std::cout << (c.ok ? "PASS " : "FAIL ") << item.name << ": " << c.detail << "\n";
  }
  bool skipped = false;
  Check live;
  try {
    live = live_workflow(skipped);
  } catch (const std::exception& e) {
    live.ok = false;
    live.detail = std::string("exception: ") + e.what();
  }
  std::cout << (skipped ? "SKIP " : live.ok ? "PASS " : "FAIL ") << "live-endpoint-workflow (non-gating): "
            << live.detail << "\n";
  std::cout << fmt::format("{} of {} gating criteria passed\n", items.size() - failures, items.size());
  return failures == 0 ? 0 : 1;
}
