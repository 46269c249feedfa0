#pragma once

#include <cmath>
#include <vector>

#include "ctrlgen/backbone.hpp"
#include "ctrlgen/corpus.hpp"
#include "ctrlgen/discriminator.hpp"
#include "ctrlgen/numerics.hpp"
#include "ctrlgen/tensor_io.hpp"

namespace testutil {

using namespace ctrlgen;

inline Vector random_vector(Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  Vector v(n);
  fill_uniform(v, rng, lo, hi);
  return v;
}

inline void randomize(std::vector<TensorRef> refs, Rng& rng, double scale = 0.5) {
  for (auto& t : refs) fill_uniform(t.values, rng, -scale, scale);
}

inline DiscriminatorParams random_disc(std::size_t d_h, std::size_t d_e, std::uint64_t seed,
                                       double scale = 0.5) {
  DiscriminatorParams p(d_h, d_e, "attr");
  Rng rng(seed, 7);
  randomize(p.tensors(), rng, scale);
  return p;
}

/// Flattens every tensor of a parameter set, in tensors() order.
inline Vector flatten(std::vector<TensorRef> refs) {
  Vector out;
  for (const auto& t : refs) out.insert(out.end(), t.values.begin(), t.values.end());
  return out;
}

inline void unflatten(std::vector<TensorRef> refs, std::span<const double> flat) {
  std::size_t k = 0;
  for (auto& t : refs) {
    for (double& v : t.values) v = flat[k++];
  }
}

/// A small trained backbone shared by tests that need realistic hidden states.
inline const BackboneModel& small_backbone() {
  static const BackboneModel model = [] {
    SynthSpec spec;
    spec.vocab_size = 16;
    spec.seed = 5;
    spec.partition_seed = 5;
    const auto data = synth_corpus(spec.resolve(), 60);
    BackboneTrainConfig cfg;
    cfg.epochs = 3;
    cfg.d_h = 8;
    cfg.d_e = 6;
    return train_backbone(token_sequences(data), Vocabulary::synthetic(16), cfg);
  }();
  return model;
}

inline SynthSpec small_spec() {
  SynthSpec spec;
  spec.vocab_size = 16;
  spec.seed = 5;
  spec.partition_seed = 5;
  return spec.resolve();
}

}  // namespace testutil
