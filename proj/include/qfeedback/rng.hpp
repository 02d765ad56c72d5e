#pragma once

#include <cstdint>
#include <random>

#include "qfeedback/common.hpp"

namespace qfb {

// Per-trajectory random stream. The derivation rule (master seed, stream
// index) -> generator state is part of the reproducibility contract:
// trajectories can run on any worker in any order and still produce the same
// draws.
class RngStream {
 public:
  RngStream(std::uint64_t master_seed, std::uint64_t stream_index) {
    std::seed_seq seq{
        std::uint32_t(master_seed), std::uint32_t(master_seed >> 32),
        std::uint32_t(stream_index), std::uint32_t(stream_index >> 32)};
    gen_.seed(seq);
  }

  std::uint64_t raw() { return gen_(); }

  // Uniform in [0, 1) with 53 random bits; avoids generate_canonical so the
  // mapping from generator output to doubles is fixed.
  double uniform() { return double(gen_() >> 11) * 0x1.0p-53; }

 private:
  std::mt19937_64 gen_;
};

// Inverse-CDF sampling on a single uniform draw. Entries at or below p_floor
// are never returned.
inline int sample_index(const VectorXd& probabilities, RngStream& rng) {
  require(probabilities.size() > 0, "sample_index: empty distribution");
  double total = 0.0;
  for (int i = 0; i < probabilities.size(); ++i) {
    require(probabilities[i] > -tol::probability_sum,
            "sample_index: negative probability");
    total += probabilities[i];
  }
  require(std::abs(total - 1.0) <= tol::probability_sum,
          "sample_index: probabilities do not sum to 1");
  const double u = rng.uniform();
  double cumulative = 0.0;
  int last_valid = -1;
  for (int i = 0; i < probabilities.size(); ++i) {
    if (probabilities[i] <= p_floor) continue;
    last_valid = i;
    cumulative += probabilities[i];
    if (u < cumulative) return i;
  }
  require(last_valid >= 0, "sample_index: no outcome above the floor");
  return last_valid;
}

}  // namespace qfb
