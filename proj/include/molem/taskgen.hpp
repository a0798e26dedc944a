#pragma once

// Synthetic reasoning domains, deterministic splits, the pretraining corpus
// and answer judging.
//
// Every domain has a canonical convention and an alternative one (operator
// precedence vs. left-to-right, ascending vs. descending, bottom-first vs.
// top-first stack printing). Splits always use the canonical convention; the
// pretraining corpus mixes both (canonical in the minority), so the bare
// reasoner knows the mechanics of each task but leans to the wrong convention.

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace molem {

enum class Domain { Arith, SortSym, StackEval };
enum class Convention { Canonical, Alternative };

inline constexpr std::size_t kDomainCount = 3;

inline std::string domain_name(Domain d) {
  switch (d) {
    case Domain::Arith: return "arith";
    case Domain::SortSym: return "sortsym";
    case Domain::StackEval: return "stackeval";
  }
  return "?";
}

inline Domain parse_domain(std::string_view s) {
  if (s == "arith") return Domain::Arith;
  if (s == "sortsym") return Domain::SortSym;
  if (s == "stackeval") return Domain::StackEval;
  throw ContractViolation("unknown domain '" + std::string(s) + "'");
}

struct Sample {
  std::string prompt;
  std::string target;  // steps, "ANS:" + answer, terminator
  std::string answer;
};

inline constexpr std::string_view kAnswerMarker = "ANS:";

/// Arithmetic in arith and stackeval is over the digits 0..6, modulo 7.
inline constexpr int kModulus = 7;

namespace detail {

inline int reduce(int v) { return ((v % kModulus) + kModulus) % kModulus; }

inline int apply_op(char op, int a, int b) {
  switch (op) {
    case '+': return reduce(a + b);
    case '-': return reduce(a - b);
    case '*': return reduce(a * b);
  }
  throw ContractViolation(std::string("unknown operator '") + op + "'");
}

inline char digit(int v) { return static_cast<char>('0' + v); }

inline std::string finish(std::string steps, const std::string& answer) {
  steps += '.';
  steps += kAnswerMarker;
  steps += answer;
  steps += '$';
  return steps;
}

inline std::string step(int a, char op, int b, int r) { return {digit(a), op, digit(b), '=', digit(r)}; }

// arith: "a+b*c=", "a*b-c=", "a-b*c+d=". Every step is written out, e.g.
// "3+4*2=" -> "4*2=1,3+1=4.ANS:4$".
inline Sample arith_solve(const std::string& prompt, Convention conv) {
  std::vector<int> nums;
  std::vector<char> ops;
  for (char c : prompt) {
    if (c >= '0' && c <= '9') nums.push_back(c - '0');
    else if (c == '+' || c == '-' || c == '*') ops.push_back(c);
  }
  require(nums.size() == ops.size() + 1 && (ops.size() == 2 || ops.size() == 3), "malformed arith prompt");
  std::string body;
  int acc = 0;
  if (conv == Convention::Canonical && ops[0] != '*' && ops[1] == '*') {
    const int p = apply_op('*', nums[1], nums[2]);
    acc = apply_op(ops[0], nums[0], p);
    body = step(nums[1], '*', nums[2], p) + ',' + step(nums[0], ops[0], p, acc);
  } else {
    const int first = apply_op(ops[0], nums[0], nums[1]);
    acc = apply_op(ops[1], first, nums[2]);
    body = step(nums[0], ops[0], nums[1], first) + ',' + step(first, ops[1], nums[2], acc);
  }
  if (ops.size() == 3) {
    const int next = apply_op(ops[2], acc, nums[3]);
    body += ',' + step(acc, ops[2], nums[3], next);
    acc = next;
  }
  const std::string ans(1, digit(acc));
  return {prompt, finish(body, ans), ans};
}

inline std::string arith_prompt(Rng& rng) {
  auto d = [&] { return digit(static_cast<int>(rng.index(kModulus))); };
  auto pm = [&] { return rng.bernoulli(0.5) ? '+' : '-'; };
  const double u = rng.uniform();
  std::string p;
  if (u < 0.4) p = {d(), pm(), d(), '*', d()};
  else if (u < 0.6) p = {d(), '*', d(), pm(), d()};
  else p = {d(), pm(), d(), '*', d(), pm(), d()};
  return p + '=';
}

// sortsym: "dbcab?" -> dedup "dbca", sort "abcd".
inline Sample sortsym_solve(const std::string& prompt, Convention conv) {
  require(prompt.size() >= 2 && prompt.back() == '?', "malformed sortsym prompt");
  std::string dedup;
  for (char c : std::string_view(prompt).substr(0, prompt.size() - 1)) {
    require(c >= 'a' && c <= 'z', "malformed sortsym prompt");
    if (dedup.find(c) == std::string::npos) dedup += c;
  }
  std::string sorted = dedup;
  std::sort(sorted.begin(), sorted.end());
  if (conv == Convention::Alternative) std::reverse(sorted.begin(), sorted.end());
  return {prompt, finish(dedup + ',' + sorted, sorted), sorted};
}

inline std::string sortsym_prompt(Rng& rng) {
  const std::size_t len = 3 + rng.index(4);
  std::string p;
  for (std::size_t i = 0; i < len; ++i) p += static_cast<char>('a' + rng.index(6));
  return p + '?';
}

// stackeval: "[34+25*]" is a postfix program; every operator step is
// written out with the stack after it: "3+4=0(0),2*5=3(03).ANS:03$".
inline Sample stackeval_solve(const std::string& prompt, Convention conv) {
  require(prompt.size() >= 3 && prompt.front() == '[' && prompt.back() == ']', "malformed stackeval prompt");
  std::vector<int> stack;
  std::string body;
  auto show = [&] {
    std::string s;
    for (int v : stack) s += digit(v);
    if (conv == Convention::Alternative) std::reverse(s.begin(), s.end());
    return s;
  };
  for (char c : std::string_view(prompt).substr(1, prompt.size() - 2)) {
    if (c >= '0' && c <= '9') {
      stack.push_back(c - '0');
      continue;
    }
    require(stack.size() >= 2, "stack underflow in stackeval prompt");
    const int b = stack.back();
    stack.pop_back();
    const int a = stack.back();
    stack.pop_back();
    stack.push_back(apply_op(c, a, b));
    if (!body.empty()) body += ',';
    body += step(a, c, b, stack.back()) + '(' + show() + ')';
  }
  require(!body.empty(), "stackeval prompt has no operator");
  return {prompt, finish(body, show()), show()};
}

inline std::string stackeval_prompt(Rng& rng) {
  auto d = [&] { return digit(static_cast<int>(rng.index(kModulus))); };
  auto op = [&] { return "+-*"[rng.index(3)]; };
  std::string p = "[";
  if (rng.bernoulli(0.5)) p += {d(), d(), op(), d(), d(), op()};
  else p += {d(), d(), op(), d(), op(), d(), d(), op()};
  return p + ']';
}

}  // namespace detail

inline Sample solve(Domain d, const std::string& prompt, Convention conv = Convention::Canonical) {
  switch (d) {
    case Domain::Arith: return detail::arith_solve(prompt, conv);
    case Domain::SortSym: return detail::sortsym_solve(prompt, conv);
    case Domain::StackEval: return detail::stackeval_solve(prompt, conv);
  }
  throw ContractViolation("unknown domain");
}

inline std::string random_prompt(Domain d, Rng& rng) {
  switch (d) {
    case Domain::Arith: return detail::arith_prompt(rng);
    case Domain::SortSym: return detail::sortsym_prompt(rng);
    case Domain::StackEval: return detail::stackeval_prompt(rng);
  }
  throw ContractViolation("unknown domain");
}

/// Number of distinct prompts the generator can emit.
inline std::size_t prompt_capacity(Domain d) {
  switch (d) {
    case Domain::Arith: return 343 * 2 * 2 + 2401 * 4;
    case Domain::SortSym: return 216 + 1296 + 7776 + 46656;
    case Domain::StackEval: return 2401 * 9 + 16807 * 27;
  }
  return 0;
}

/// Canonical answer computed by a second, independent route: arith through
/// a precedence-climbing parser, sortsym through an ordered set, stackeval by
/// recursive descent from the last operator.
inline std::string reference_answer(Domain d, const std::string& prompt) {
  switch (d) {
    case Domain::Arith: {
      std::size_t pos = 0;
      auto number = [&]() { return static_cast<long>(prompt.at(pos++) - '0'); };
      auto term = [&]() {
        long v = number();
        while (pos < prompt.size() && prompt[pos] == '*') {
          ++pos;
          v *= number();
        }
        return v;
      };
      long v = term();
      while (pos < prompt.size() && (prompt[pos] == '+' || prompt[pos] == '-')) {
        const char op = prompt[pos++];
        const long t = term();
        v = op == '+' ? v + t : v - t;
      }
      require(pos + 1 == prompt.size() && prompt[pos] == '=', "reference parser: trailing input");
      return std::string(1, detail::digit(detail::reduce(static_cast<int>(v % kModulus))));
    }
    case Domain::SortSym: {
      std::set<char> letters(prompt.begin(), prompt.end() - 1);
      return std::string(letters.begin(), letters.end());
    }
    case Domain::StackEval: {
      const std::string body = prompt.substr(1, prompt.size() - 2);
      std::size_t end = body.size();
      auto eval = [&](auto&& self) -> long {
        const char c = body.at(--end);
        if (c >= '0' && c <= '9') return c - '0';
        const long b = self(self);
        const long a = self(self);
        return c == '+' ? a + b : c == '-' ? a - b : a * b;
      };
      std::string out;
      while (end > 0) out.insert(out.begin(), detail::digit(detail::reduce(static_cast<int>(eval(eval) % kModulus))));
      return out;
    }
  }
  throw ContractViolation("unknown domain");
}

/// Throws InvariantViolation if a sample's answer disagrees with the
/// independent reference or its target is not well formed.
inline void verify_sample(Domain d, const Sample& s) {
  const std::string ref = reference_answer(d, s.prompt);
  if (ref != s.answer) {
    throw InvariantViolation("generator answer '" + s.answer + "' disagrees with reference '" + ref + "' for '" +
                             s.prompt + "'");
  }
  const std::string tail = std::string(kAnswerMarker) + s.answer + "$";
  if (s.target.size() < tail.size() || s.target.compare(s.target.size() - tail.size(), tail.size(), tail) != 0) {
    throw InvariantViolation("malformed target '" + s.target + "'");
  }
}

struct SplitSizes {
  std::size_t train = 2000;
  std::size_t val = 100;
  std::size_t test = 200;
};

struct DomainSplits {
  Domain domain = Domain::Arith;
  std::vector<Sample> train, val, test;
};

/// Canonical-convention splits with pairwise disjoint prompts, every answer
/// re-verified.
inline DomainSplits generate_splits(Domain d, const SplitSizes& sizes, Rng& rng) {
  const std::size_t total = sizes.train + sizes.val + sizes.test;
  if (total > prompt_capacity(d) / 2) {
    throw ContractViolation("requested " + std::to_string(total) + " " + domain_name(d) +
                            " samples exceeds unique-instance capacity");
  }
  std::unordered_set<std::string> seen;
  DomainSplits out;
  out.domain = d;
  for (auto [dst, n] : {std::pair{&out.train, sizes.train}, {&out.val, sizes.val}, {&out.test, sizes.test}}) {
    while (dst->size() < n) {
      std::string p = random_prompt(d, rng);
      if (!seen.insert(p).second) continue;
      Sample s = solve(d, p);
      verify_sample(d, s);
      dst->push_back(std::move(s));
    }
  }
  return out;
}

struct CorpusConfig {
  std::size_t per_domain = 3000;
  double canonical_fraction = 0.35;
  std::size_t filler = 600;
};

inline std::string filler_sentence(Rng& rng) {
  static const char* const kWords[] = {"the", "a", "small", "red", "cat", "dog", "runs", "sees", "old", "tree",
                                       "over", "under", "and", "then", "bird", "sings", "near", "river", "slow",
                                       "bright", "moon", "we", "walk", "home", "rain", "falls", "on", "hill"};
  constexpr std::size_t kN = sizeof(kWords) / sizeof(kWords[0]);
  std::string s;
  const std::size_t clauses = 1 + rng.index(2);
  for (std::size_t c = 0; c < clauses; ++c) {
    if (c) s += ", ";
    const std::size_t words = 3 + rng.index(4);
    for (std::size_t w = 0; w < words; ++w) {
      if (w) s += ' ';
      s += kWords[rng.index(kN)];
    }
  }
  return s + ".$";
}

struct CorpusLine {
  std::string text;
  std::size_t prompt_len = 0;  // 0 for filler
};

/// Pretraining text: every domain in both conventions plus generic filler,
/// shuffled. Prompts in `excluded` never appear.
inline std::vector<CorpusLine> generate_corpus(const CorpusConfig& cfg, const std::unordered_set<std::string>& excluded,
                                               Rng& rng) {
  std::vector<CorpusLine> lines;
  for (Domain d : {Domain::Arith, Domain::SortSym, Domain::StackEval}) {
    std::size_t made = 0;
    while (made < cfg.per_domain) {
      std::string p = random_prompt(d, rng);
      if (excluded.count(p)) continue;
      const Convention conv = rng.bernoulli(cfg.canonical_fraction) ? Convention::Canonical : Convention::Alternative;
      const Sample s = solve(d, p, conv);
      lines.push_back({s.prompt + s.target, s.prompt.size()});
      ++made;
    }
  }
  for (std::size_t i = 0; i < cfg.filler; ++i) lines.push_back({filler_sentence(rng), 0});
  rng.shuffle(lines);
  return lines;
}

/// Text after the last answer marker, trimmed, compared exactly with gold.
inline bool judge(std::string_view generated, std::string_view gold) {
  const std::size_t at = generated.rfind(kAnswerMarker);
  if (at == std::string_view::npos) return false;
  std::string_view tail = generated.substr(at + kAnswerMarker.size());
  auto space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; };
  while (!tail.empty() && space(tail.front())) tail.remove_prefix(1);
  while (!tail.empty() && space(tail.back())) tail.remove_suffix(1);
  return tail == gold;
}

inline void write_tsv(const std::string& path, const std::vector<Sample>& samples) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), "cannot open '" + path + "' for writing");
  for (const Sample& s : samples) out << s.prompt << '\t' << s.target << '\n';
}

inline std::vector<Sample> read_tsv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "cannot open '" + path + "'");
  std::vector<Sample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::size_t tab = line.find('\t');
    require(tab != std::string::npos, "dataset line without a tab: '" + line + "'");
    Sample s{line.substr(0, tab), line.substr(tab + 1), ""};
    const std::size_t at = s.target.rfind(kAnswerMarker);
    require(at != std::string::npos && !s.target.empty() && s.target.back() == '$', "malformed target '" + s.target + "'");
    s.answer = s.target.substr(at + kAnswerMarker.size(), s.target.size() - at - kAnswerMarker.size() - 1);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace molem
