#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "psv/param.hpp"
#include "psv/rng.hpp"
#include "psv/tape.hpp"
#include "psv/tensor.hpp"

namespace psv {

// A parameterized scalar function: builds the loss on the given context from
// the current contents of the store.
template <typename T>
using LossFn = std::function<Var<T>(ForwardCtx<T>&, const ParamStoreT<T>&)>;

struct GradCheckOptions {
  double eps = 1e-4;
  // Coordinates sampled per parameter group; <= 0 checks every coordinate.
  std::int64_t max_coords_per_group = 24;
  std::uint64_t sample_seed = 17;
  // Self-test hook: analytic gradients are scaled by this factor before the
  // comparison, so a deliberately corrupted gradient must be detected.
  double corrupt_scale = 1.0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_coord;  // "group[i]"
};

// Central-difference gradient check, meant to run on the double instantiation.
// Reported error per coordinate is
//   |analytic - (f(x+eps e) - f(x-eps e)) / (2 eps)| / max(1, |analytic|).
inline GradCheckResult grad_check(const LossFn<double>& f,
                                  ParamStoreT<double>& store,
                                  const GradCheckOptions& opts = {}) {
  auto eval = [&]() {
    Tape<double> tape;
    ForwardCtx<double> ctx(tape);
    Var<double> loss = f(ctx, store);
    return tape.val(loss).data[0];
  };

  // Analytic gradients at the current point.
  std::map<std::string, TensorT<double>> analytic;
  {
    Tape<double> tape;
    ForwardCtx<double> ctx(tape);
    Var<double> loss = f(ctx, store);
    analytic = backward(loss, ctx, store);
  }

  GradCheckResult result;
  Rng rng(opts.sample_seed);
  for (std::size_t gi = 0; gi < store.size(); ++gi) {
    auto& g = store[gi];
    if (!g.trainable) continue;
    const auto& ga = analytic.at(g.name);
    std::int64_t n = g.tensor.numel();
    std::vector<std::int64_t> coords;
    if (opts.max_coords_per_group <= 0 || n <= opts.max_coords_per_group) {
      coords.resize(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
    } else {
      Rng r = rng.fork(g.name);
      for (std::int64_t i = 0; i < opts.max_coords_per_group; ++i)
        coords.push_back(static_cast<std::int64_t>(
            r.uniform_int(static_cast<std::uint64_t>(n))));
    }
    for (std::int64_t c : coords) {
      double saved = g.tensor[c];
      g.tensor[c] = saved + opts.eps;
      double fp = eval();
      g.tensor[c] = saved - opts.eps;
      double fm = eval();
      g.tensor[c] = saved;
      double fd = (fp - fm) / (2.0 * opts.eps);
      double an = ga[c] * opts.corrupt_scale;
      double rel = std::abs(an - fd) / std::max(1.0, std::abs(an));
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_coord = g.name + "[" + std::to_string(c) + "]";
      }
    }
  }
  return result;
}

}  // namespace psv
