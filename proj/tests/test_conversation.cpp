#include <gtest/gtest.h>

#include "sclab/conversation.hpp"
#include "sclab/dataset.hpp"
#include "sclab/errors.hpp"
#include "support.hpp"

using namespace sclab;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorKind::kParse;
}

const QuestionRecord kHuman{"q1", "Is human a kind of animals?", std::nullopt, true};

}  // namespace

TEST(Templates, InitialPromptMatchesTable) {
  EXPECT_EQ(render_initial(kHuman), "Is human a kind of animals? Only respond with \"Yes\" or \"No\".");
}

TEST(Templates, PassageDoesNotChangeInitialPrompt) {
  QuestionRecord with = kHuman;
  with.passage = "Humans are mammals.";
  EXPECT_EQ(render_initial(with), render_initial(kHuman));
}

TEST(Templates, BracesInQuestionSurvive) {
  QuestionRecord q{"b", "Is {AnotherAnswer} a {Question}?", std::nullopt, true};
  EXPECT_EQ(render_initial(q), "Is {AnotherAnswer} a {Question}? Only respond with \"Yes\" or \"No\".");
}

TEST(Templates, RefinementWordings) {
  const auto& t = TemplateSet::builtin();
  EXPECT_EQ(render_refinement(t.variant(VariantId::kV1), {}), "Are you sure?. Think and answer again.");
  EXPECT_EQ(render_refinement(t.variant(VariantId::kV2), {}), "You are wrong. Think and answer again.");
  EXPECT_EQ(render_refinement(t.variant(VariantId::kV3), {"No", std::nullopt}),
            "I think the answer should be No. Think and answer again.");
  EXPECT_EQ(kind_of([&] { render_refinement(t.variant(VariantId::kV3), {}); }), ErrorKind::kMissingBinding);
  EXPECT_EQ(render_feedback(t.variant(VariantId::kV4), {}),
            "Assume that this answer could be either correct or incorrect. Review the answer carefully and report "
            "any serious problems you find.");
  EXPECT_EQ(render_refinement(t.variant(VariantId::kV4), {}), "Based on the problems you found, improve your answer.");
}

TEST(Templates, FeedbackOnlyForV4V5) {
  const auto& t = TemplateSet::builtin();
  for (VariantId v : all_variants()) {
    const bool want = v == VariantId::kV4 || v == VariantId::kV5;
    EXPECT_EQ(t.variant(v).has_feedback(), want) << to_string(v);
  }
}

TEST(Templates, UnknownPlaceholderIsMissingBinding) {
  EXPECT_EQ(kind_of([] { substitute("{Nope}", {}); }), ErrorKind::kMissingBinding);
  EXPECT_EQ(substitute("a {Question} b", {{"Question", "{Question}"}}), "a {Question} b");
}

TEST(Templates, LongWordingAvailable) {
  const auto& t = TemplateSet::builtin();
  EXPECT_EQ(t.get("refine_confirm_long"),
            "Are you sure about your answer? Please think carefully and answer again. Only respond with \"Yes\" or "
            "\"No\".");
  const TemplateSet swapped = t.with("v1_refinement", t.get("refine_confirm_long"));
  EXPECT_EQ(render_refinement(swapped.variant(VariantId::kV1), {}), t.get("refine_confirm_long"));
}

TEST(Templates, LoadDirRequiresEveryTemplate) {
  const std::string dir = testsupport::temp_dir("tmpl");
  write_file(dir + "/initial.txt", "{Question}?");
  EXPECT_EQ(kind_of([&] { TemplateSet::load_dir(dir); }), ErrorKind::kConfig);
}

TEST(ParseYesNo, Examples) {
  EXPECT_EQ(parse_yes_no(" No."), AnswerLabel::kNo);
  EXPECT_EQ(parse_yes_no("Yes"), AnswerLabel::kYes);
  EXPECT_EQ(parse_yes_no("It depends."), AnswerLabel::kAmbiguous);
  EXPECT_EQ(parse_yes_no("YES!"), AnswerLabel::kYes);
  EXPECT_EQ(parse_yes_no("no, it is not"), AnswerLabel::kNo);
  EXPECT_EQ(parse_yes_no("Yesterday it rained"), AnswerLabel::kAmbiguous);
  EXPECT_EQ(parse_yes_no(""), AnswerLabel::kAmbiguous);
}

TEST(ParseYesNo, TemplatesNeverYieldAnAnswer) {
  const auto& t = TemplateSet::builtin();
  for (VariantId v : all_variants()) {
    const PromptVariant pv = t.variant(v);
    EXPECT_EQ(parse_yes_no(pv.refinement_template), AnswerLabel::kAmbiguous) << to_string(v);
    if (pv.feedback_template) EXPECT_EQ(parse_yes_no(*pv.feedback_template), AnswerLabel::kAmbiguous);
  }
  EXPECT_EQ(parse_yes_no(t.initial_template()), AnswerLabel::kAmbiguous);
  EXPECT_EQ(parse_yes_no(t.get("refine_confirm_long")), AnswerLabel::kAmbiguous);
  EXPECT_EQ(parse_yes_no(render_initial(kHuman)), AnswerLabel::kAmbiguous);
  // An answer echoing the instruction is still read from its own words.
  EXPECT_EQ(parse_yes_no("No. Only respond with \"Yes\" or \"No\"."), AnswerLabel::kNo);
}

TEST(BuildTurns, StagesAndPrefixProperty) {
  const auto& t = TemplateSet::builtin();
  for (VariantId v : all_variants()) {
    const PromptVariant pv = t.variant(v);
    const Bindings b{"No", std::nullopt};
    Conversation c = build_turns(kHuman, pv, Stage::kInitial, {});
    ASSERT_EQ(c.size(), 1u);
    c = c.with({Role::kAssistant, "Yes"});
    Conversation before = c;
    if (pv.has_feedback()) {
      c = build_turns(kHuman, pv, Stage::kFeedback, c, b);
      ASSERT_EQ(c.size(), 3u);
      EXPECT_TRUE(std::equal(before.messages.begin(), before.messages.end(), c.messages.begin()));
      c = c.with({Role::kAssistant, "The answer looks correct."});
      before = c;
    } else {
      EXPECT_EQ(kind_of([&] { build_turns(kHuman, pv, Stage::kFeedback, c, b); }), ErrorKind::kStageOrderViolation);
    }
    c = build_turns(kHuman, pv, Stage::kRefinement, c, b);
    EXPECT_EQ(c.size(), before.size() + 1);
    EXPECT_TRUE(std::equal(before.messages.begin(), before.messages.end(), c.messages.begin()));
    EXPECT_TRUE(c.well_formed());
  }
  EXPECT_EQ(kind_of([&] { build_turns(kHuman, t.variant(VariantId::kV1), Stage::kRefinement, {}); }),
            ErrorKind::kStageOrderViolation);
}

TEST(BuildTurns, V4FeedbackAfterTwoMessages) {
  const auto& t = TemplateSet::builtin();
  Conversation c = build_turns(kHuman, t.variant(VariantId::kV4), Stage::kInitial, {});
  c = c.with({Role::kAssistant, "Yes"});
  c = build_turns(kHuman, t.variant(VariantId::kV4), Stage::kFeedback, c);
  ASSERT_EQ(c.size(), 3u);
  EXPECT_EQ(c.messages.back().content, render_feedback(t.variant(VariantId::kV4), {}));
}

TEST(BuildTurns, Deterministic) {
  const auto& pv = TemplateSet::builtin().variant(VariantId::kV3);
  Conversation h = build_turns(kHuman, pv, Stage::kInitial, {}).with({Role::kAssistant, "Yes"});
  EXPECT_EQ(build_turns(kHuman, pv, Stage::kRefinement, h, {"No", {}}),
            build_turns(kHuman, pv, Stage::kRefinement, h, {"No", {}}));
}

TEST(Variants, NamesRoundTrip) {
  for (VariantId v : all_variants()) EXPECT_EQ(variant_from_string(to_string(v)), v);
  EXPECT_EQ(variant_from_string("v2"), VariantId::kV2);
  EXPECT_EQ(kind_of([] { variant_from_string("V9"); }), ErrorKind::kConfig);
  EXPECT_EQ(opposite_answer(AnswerLabel::kYes), "No");
  EXPECT_EQ(opposite_answer(AnswerLabel::kNo), "Yes");
}

TEST(Messages, JsonRoundTripIsByteExact) {
  Conversation c;
  c.messages = {{Role::kSystem, "sys"}, {Role::kUser, "  tabs\tand\nnewlines \"q\" é "}, {Role::kAssistant, ""}};
  const nlohmann::json j = c;
  EXPECT_EQ(nlohmann::json::parse(j.dump()).get<Conversation>(), c);
}

TEST(Dataset, ParsesAndNamesRecords) {
  const Dataset d = parse_dataset(
      "{\"question\": \"is sky blue\", \"passage\": \"p\", \"answer\": true}\n"
      "\n"
      "{\"id\": \"x\", \"question\": \"is grass red\", \"answer\": false}\n");
  ASSERT_EQ(d.questions.size(), 2u);
  EXPECT_EQ(d.questions[0].id, "q1");
  EXPECT_TRUE(d.questions[0].gold);
  EXPECT_EQ(d.questions[1].id, "x");
  EXPECT_FALSE(d.questions[1].passage.has_value());
  EXPECT_EQ(d.digest.size(), 64u);
}

TEST(Dataset, RejectsBadInput) {
  EXPECT_EQ(kind_of([] {
              parse_dataset("{\"id\":\"a\",\"question\":\"x\",\"answer\":true}\n{\"id\":\"a\",\"question\":\"y\",\"answer\":true}");
            }),
            ErrorKind::kConfig);
  EXPECT_EQ(kind_of([] { parse_dataset("{\"question\":\"\",\"answer\":true}"); }), ErrorKind::kConfig);
  EXPECT_EQ(kind_of([] { parse_dataset("not json"); }), ErrorKind::kConfig);
}

TEST(Dataset, Sha256KnownVector) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
