#pragma once

// Latent-memory experts: each expert is an independent adapter over the
// frozen reasoner that turns a context into an m x d_model latent segment by
// continuous rollout.

#include <cstddef>
#include <span>
#include <vector>

#include "autograd.hpp"
#include "lora.hpp"
#include "reasoner.hpp"

namespace molem {

/// Latent segment of one expert for `context` with earlier segments spliced
/// in at their positions.
inline Tensor generate_memory(Reasoner& model, LoraAdapter& expert, std::span<const int> context,
                              const std::vector<Injection>& prior, std::size_t m) {
  require(!context.empty() || !prior.empty(), "generate_memory needs a nonempty context");
  Tape tape(false);
  Stream s(model, tape, &expert);
  std::vector<Var> parts;
  std::size_t cursor = 0;
  for (const Injection& inj : prior) {
    require(inj.position <= context.size() && inj.position >= cursor, "injection positions must be ordered");
    if (inj.position > cursor) parts.push_back(s.embed(context.subspan(cursor, inj.position - cursor)));
    parts.push_back(tape.constant(inj.segment));
    cursor = inj.position;
  }
  if (cursor < context.size()) parts.push_back(s.embed(context.subspan(cursor)));
  s.extend(concat_rows(parts));
  return rollout(s, m).value();
}

}  // namespace molem
