#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "dmssd/neural.hpp"

namespace dmssd::oracle {

// Largest relative disagreement between backward() and central finite
// differences of  L = sum_k c_k logit_k + c_v value  for random c.
inline double max_fd_relative_error(PolicyValueNet& net, const std::vector<double>& obs, Rng& rng,
                                    double h = 1e-5) {
  Logits c{};
  for (auto& v : c) v = rng.normal();
  const double cv = rng.normal();
  const auto loss = [&] {
    const NetOutput o = net.forward(obs);
    double l = cv * o.value;
    for (std::size_t k = 0; k < kNumActions; ++k) l += c[k] * o.logits[k];
    return l;
  };

  ForwardCache cache;
  net.forward(obs, cache);
  std::vector<double> grads(net.size(), 0.0);
  net.backward(cache, c, cv, grads);

  double worst = 0.0;
  auto params = net.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = params[i];
    params[i] = saved + h;
    const double up = loss();
    params[i] = saved - h;
    const double down = loss();
    params[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max(1e-6, std::abs(numeric) + std::abs(grads[i]));
    worst = std::max(worst, std::abs(numeric - grads[i]) / denom);
  }
  return worst;
}

// Network with random weights (larger than the init gains so every layer
// carries signal) and a random input.
inline PolicyValueNet random_net(int n_p, int hidden, Rng& rng) {
  PolicyValueNet net(2 * n_p + 1, n_p, hidden, hidden);
  for (double& p : net.params()) p = 0.15 * rng.normal();
  return net;
}

inline std::vector<double> random_input(int dim, Rng& rng) {
  std::vector<double> x(static_cast<std::size_t>(dim));
  for (double& v : x) v = rng.uniform();
  return x;
}

}  // namespace dmssd::oracle
