#pragma once

#include <vector>

#include "bimot/gradcheck.hpp"
#include "bimot/instructions.hpp"
#include "bimot/nn.hpp"

namespace bimot::testing {

inline std::vector<NamedTensor> named_params(const ParamStore<double>& store) {
  std::vector<NamedTensor> out;
  for (const auto& p : store.params()) out.push_back({p.name, p.tensor});
  return out;
}

inline std::vector<double> random_vector(std::size_t n, Rng& rng, double stddev = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = stddev * gaussian(rng);
  return v;
}

// Random hybrid sequence: text ids below the motion tokens, motion inputs with
// random latents, and holders, mixed with probability p_motion per position.
inline HybridSequence random_hybrid(const Vocabulary& vocab, std::size_t length, int latent, double p_motion,
                                    Rng& rng) {
  HybridSequence seq;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < length; ++i) {
    if (u(rng) < p_motion) {
      if (u(rng) < 0.5) {
        seq.push_motion_input(vocab.holder_in(), random_vector(static_cast<std::size_t>(latent), rng));
      } else {
        seq.push_holder(vocab.holder_out());
      }
    } else {
      seq.push_text(static_cast<int>(rng() % static_cast<std::uint64_t>(vocab.holder_in())));
    }
  }
  return seq;
}

}  // namespace bimot::testing
