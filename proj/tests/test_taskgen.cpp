#include "catch_amalgamated.hpp"

#include <algorithm>
#include <filesystem>
#include <unordered_set>

#include "molem/taskgen.hpp"
#include "molem/vocab.hpp"

using namespace molem;

namespace {

// Test-side evaluator: standard precedence via two passes over the tokens.
int eval_mod7(const std::string& expr) {
  std::vector<long> terms;
  std::vector<char> signs{'+'};
  long cur = expr[0] - '0';
  for (std::size_t i = 1; i + 1 < expr.size(); i += 2) {
    const char op = expr[i];
    const long v = expr[i + 1] - '0';
    if (op == '*') {
      cur *= v;
    } else {
      terms.push_back(cur);
      signs.push_back(op);
      cur = v;
    }
  }
  terms.push_back(cur);
  long total = 0;
  for (std::size_t i = 0; i < terms.size(); ++i) total += signs[i] == '+' ? terms[i] : -terms[i];
  return static_cast<int>(((total % 7) + 7) % 7);
}

}  // namespace

TEST_CASE("arith example") {
  const Sample s = solve(Domain::Arith, "3+4*2=");
  CHECK(s.answer == "4");
  CHECK(s.target == "4*2=1,3+1=4.ANS:4$");
  CHECK(s.target.find("ANS:4") != std::string::npos);
  const Sample alt = solve(Domain::Arith, "3+4*2=", Convention::Alternative);
  CHECK(alt.target == "3+4=0,0*2=0.ANS:0$");
}

TEST_CASE("every generated arith answer matches an independent evaluator") {
  Rng rng(1);
  for (int i = 0; i < 2000; ++i) {
    const std::string p = random_prompt(Domain::Arith, rng);
    const Sample s = solve(Domain::Arith, p);
    REQUIRE(s.answer == std::string(1, static_cast<char>('0' + eval_mod7(p.substr(0, p.size() - 1)))));
  }
}

TEST_CASE("sortsym and stackeval examples") {
  const Sample s = solve(Domain::SortSym, "dbcab?");
  CHECK(s.target == "dbca,abcd.ANS:abcd$");
  CHECK(solve(Domain::SortSym, "dbcab?", Convention::Alternative).answer == "dcba");
  const Sample k = solve(Domain::StackEval, "[34+25*]");
  CHECK(k.target == "3+4=0(0),2*5=3(03).ANS:03$");
  CHECK(solve(Domain::StackEval, "[34+25*]", Convention::Alternative).target == "3+4=0(0),2*5=3(30).ANS:30$");
  CHECK(solve(Domain::StackEval, "[34+25*]", Convention::Alternative).answer == "30");
}

TEST_CASE("every domain agrees with its reference solver") {
  for (Domain d : {Domain::Arith, Domain::SortSym, Domain::StackEval}) {
    Rng rng(static_cast<std::uint64_t>(d) + 10);
    for (int i = 0; i < 1000; ++i) {
      const Sample s = solve(d, random_prompt(d, rng));
      REQUIRE_NOTHROW(verify_sample(d, s));
    }
  }
}

TEST_CASE("splits are deterministic and disjoint") {
  const SplitSizes sz{300, 50, 100};
  for (Domain d : {Domain::Arith, Domain::SortSym, Domain::StackEval}) {
    Rng a(7), b(7);
    const DomainSplits x = generate_splits(d, sz, a);
    const DomainSplits y = generate_splits(d, sz, b);
    REQUIRE(x.train.size() == 300);
    REQUIRE(x.val.size() == 50);
    REQUIRE(x.test.size() == 100);
    for (std::size_t i = 0; i < x.train.size(); ++i) CHECK(x.train[i].target == y.train[i].target);
    std::unordered_set<std::string> train;
    for (const Sample& s : x.train) train.insert(s.prompt);
    for (const Sample& s : x.test) CHECK_FALSE(train.count(s.prompt));
    for (const Sample& s : x.val) CHECK_FALSE(train.count(s.prompt));
  }
}

TEST_CASE("oversized split requests are rejected") {
  Rng rng(1);
  CHECK_THROWS_AS(generate_splits(Domain::Arith, {100000, 10, 10}, rng), ContractViolation);
}

TEST_CASE("corpus excludes evaluation prompts and encodes cleanly") {
  Rng rng(3);
  CorpusConfig cc;
  cc.per_domain = 400;
  cc.filler = 50;
  std::unordered_set<std::string> excluded{"3+4*2=", "dbcab?", "[34+25*]"};
  const auto lines = generate_corpus(cc, excluded, rng);
  CHECK(lines.size() == 3 * 400 + 50);
  const Vocabulary v = Vocabulary::character_level();
  std::size_t filler = 0;
  for (const CorpusLine& l : lines) {
    CHECK_NOTHROW(v.encode(l.text));
    CHECK(l.text.back() == '$');
    if (l.prompt_len == 0) {
      ++filler;
    } else {
      CHECK_FALSE(excluded.count(l.text.substr(0, l.prompt_len)));
    }
  }
  CHECK(filler == 50);
}

TEST_CASE("judge") {
  CHECK(judge("1,4.ANS:4", "4"));
  CHECK(judge("1,4.ANS: 4 ", "4"));
  CHECK_FALSE(judge("1,4.4", "4"));
  CHECK_FALSE(judge("ANS:41", "4"));
  CHECK(judge("ANS:3.ANS:4", "4"));
}

TEST_CASE("tsv round trip") {
  const auto path = std::filesystem::temp_directory_path() / "molem_taskgen_rt.tsv";
  std::vector<Sample> samples{solve(Domain::Arith, "1+2*3="), solve(Domain::SortSym, "cab?")};
  write_tsv(path.string(), samples);
  const auto back = read_tsv(path.string());
  REQUIRE(back.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back[i].prompt == samples[i].prompt);
    CHECK(back[i].target == samples[i].target);
    CHECK(back[i].answer == samples[i].answer);
  }
  std::filesystem::remove(path);
}

TEST_CASE("vocabulary") {
  const Vocabulary v = Vocabulary::character_level();
  const std::string text = "[34+25*]3+4=0(0),2*5=3(03).ANS:03$";
  CHECK(v.decode(v.encode(text)) == text);
  CHECK(v.is_delimiter(v.id_of(',')));
  CHECK(v.is_delimiter(v.id_of('.')));
  CHECK_FALSE(v.is_delimiter(v.id_of('a')));
  CHECK(v.terminator_id() == v.id_of('$'));
  CHECK_THROWS_AS(v.encode("#"), ContractViolation);
}
