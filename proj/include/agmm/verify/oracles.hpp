#pragma once

// Brute-force reference implementations.
//
// Everything here works on plain std::vector<double> with explicit loops and
// shares no code with the tensor/tape path it is used to check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

namespace agmm::oracle {

inline constexpr std::uint8_t kIgnoreLabel = 255;

/// Direct 7-nested-loop cross-correlation.
inline std::vector<double> conv2d(const std::vector<double>& in, std::size_t N, std::size_t C, std::size_t H,
                                  std::size_t W, const std::vector<double>& ker, std::size_t Co, std::size_t kh,
                                  std::size_t kw, const std::vector<double>& bias, std::size_t stride,
                                  std::size_t pad) {
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  std::vector<double> out(N * Co * Ho * Wo, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < Co; ++o)
      for (std::size_t y = 0; y < Ho; ++y)
        for (std::size_t x = 0; x < Wo; ++x) {
          double acc = bias.empty() ? 0.0 : bias[o];
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long iy = long(y * stride + i) - long(pad), ix = long(x * stride + j) - long(pad);
                if (iy < 0 || ix < 0 || iy >= long(H) || ix >= long(W)) continue;
                acc += in[((n * C + c) * H + std::size_t(iy)) * W + std::size_t(ix)] *
                       ker[((o * C + c) * kh + i) * kw + j];
              }
          out[((n * Co + o) * Ho + y) * Wo + x] = acc;
        }
  return out;
}

struct Component {
  int class_id;
  std::vector<double> mu;
  double sigma;
  std::size_t support;
};

/// Features laid out [C][P] (P = H*W); labels length P.
inline double dist2(const std::vector<double>& f, std::size_t C, std::size_t P, std::size_t pixel,
                    const std::vector<double>& mu) {
  double s = 0;
  for (std::size_t c = 0; c < C; ++c) {
    const double d = f[c * P + pixel] - mu[c];
    s += d * d;
  }
  return s / double(C);
}

inline std::vector<Component> gmm_params(const std::vector<double>& f, std::size_t C, std::size_t P,
                                         const std::vector<std::uint8_t>& labels, double sigma_floor) {
  std::vector<Component> out;
  for (int k = 0; k < 255; ++k) {
    std::vector<double> mu(C, 0.0);
    std::size_t n = 0;
    for (std::size_t p = 0; p < P; ++p)
      if (labels[p] == k) {
        ++n;
        for (std::size_t c = 0; c < C; ++c) mu[c] += f[c * P + p];
      }
    if (!n) continue;
    for (auto& m : mu) m /= double(n);
    double v = 0;
    for (std::size_t p = 0; p < P; ++p)
      if (labels[p] == k) v += dist2(f, C, P, p, mu);
    v /= double(n);
    out.push_back({k, mu, std::max(std::sqrt(v), sigma_floor), n});
  }
  return out;
}

/// [K][P] scores exp(-d^2 / (2 sigma^2)).
inline std::vector<double> gmm_scores(const std::vector<double>& f, std::size_t C, std::size_t P,
                                      const std::vector<Component>& comps) {
  std::vector<double> g(comps.size() * P);
  for (std::size_t k = 0; k < comps.size(); ++k)
    for (std::size_t p = 0; p < P; ++p)
      g[k * P + p] = std::exp(-dist2(f, C, P, p, comps[k].mu) / (2.0 * comps[k].sigma * comps[k].sigma));
  return g;
}

inline std::vector<std::uint8_t> argmax_labels(const std::vector<double>& g, std::size_t K, std::size_t P,
                                               const std::vector<int>& ids, double min_conf) {
  std::vector<std::uint8_t> out(P, kIgnoreLabel);
  for (std::size_t p = 0; p < P; ++p) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (g[k * P + p] > g[best * P + p]) best = k;
    if (g[best * P + p] >= min_conf) out[p] = std::uint8_t(ids[best]);
  }
  return out;
}

inline std::vector<std::uint8_t> label_assignment(const std::vector<double>& f, std::size_t C, std::size_t P,
                                                  const std::vector<Component>& comps) {
  std::vector<std::uint8_t> out(P, kIgnoreLabel);
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t i = 0; i < comps.size(); ++i) {
      bool ok = std::sqrt(dist2(f, C, P, p, comps[i].mu)) < comps[i].sigma;
      for (std::size_t j = 0; j < comps.size() && ok; ++j)
        if (j != i && !(std::sqrt(dist2(f, C, P, p, comps[j].mu)) > comps[j].sigma)) ok = false;
      if (ok) out[p] = std::uint8_t(comps[i].class_id);
    }
  return out;
}

inline double bce(double t, double p) {
  const double eps = 1e-12;
  const double lp = std::log(std::max(p, eps));
  const double lq = std::log(std::max(1.0 - p, eps));
  return -(t * lp + (1.0 - t) * lq);
}

/// probs [K][P].
inline double loss_seg(const std::vector<double>& probs, std::size_t K, std::size_t P,
                       const std::vector<std::uint8_t>& labels) {
  double s = 0;
  std::size_t n = 0;
  for (std::size_t p = 0; p < P; ++p) {
    if (labels[p] == kIgnoreLabel) continue;
    ++n;
    for (std::size_t k = 0; k < K; ++k) s += bce(labels[p] == k ? 1.0 : 0.0, probs[k * P + p]);
  }
  return s / double(n);
}

/// g [Kg][P] aligned with ids; probs [K][P].
inline double loss_self(const std::vector<double>& probs, std::size_t P, const std::vector<double>& g,
                        const std::vector<int>& ids) {
  double s = 0;
  for (std::size_t k = 0; k < ids.size(); ++k)
    for (std::size_t p = 0; p < P; ++p) s += bce(g[k * P + p], probs[std::size_t(ids[k]) * P + p]);
  return s / double(P);
}

inline double loss_weak(const std::vector<double>& g, const std::vector<int>& ids, std::size_t P,
                        const std::vector<std::uint8_t>& labels) {
  double s = 0;
  std::size_t n = 0;
  for (std::size_t p = 0; p < P; ++p) {
    if (labels[p] == kIgnoreLabel) continue;
    ++n;
    for (std::size_t k = 0; k < ids.size(); ++k) s += bce(labels[p] == ids[k] ? 1.0 : 0.0, g[k * P + p]);
  }
  return s / double(n);
}

inline double loss_con_centers(const std::vector<Component>& comps) {
  const std::size_t K = comps.size();
  if (K < 2) return 0.0;
  double s = 0;
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = i + 1; j < K; ++j) {
      double d = 0;
      for (std::size_t c = 0; c < comps[i].mu.size(); ++c) d += (comps[i].mu[c] - comps[j].mu[c]) * (comps[i].mu[c] - comps[j].mu[c]);
      s += std::exp(-d / double(comps[i].mu.size()));
    }
  return 2.0 / double(K * (K + 1)) * s;
}

inline double loss_con_pixel(const std::vector<double>& f, std::size_t C, std::size_t P,
                             const std::vector<std::uint8_t>& labels, const std::vector<Component>& comps) {
  double pos = 0, neg = 0;
  std::size_t np = 0, nn = 0;
  for (std::size_t p = 0; p < P; ++p) {
    if (labels[p] == kIgnoreLabel) continue;
    for (const auto& comp : comps) {
      const double e = std::exp(-dist2(f, C, P, p, comp.mu));
      if (comp.class_id == labels[p]) {
        pos += 1.0 - e;
        ++np;
      } else {
        neg += e;
        ++nn;
      }
    }
  }
  return (np ? pos / double(np) : 0.0) + (nn ? neg / double(nn) : 0.0);
}

inline double loss_cls(const std::vector<double>& scores, const std::vector<bool>& present_fg) {
  double s = 0;
  for (std::size_t k = 0; k < scores.size(); ++k)
    s += bce(present_fg[k] ? 1.0 : 0.0, 1.0 / (1.0 + std::exp(-scores[k])));
  return s / double(scores.size());
}

/// confusion[t][p] counts over pixels with t != IGNORE.
inline std::vector<std::vector<std::size_t>> confusion(const std::vector<std::uint8_t>& truth,
                                                       const std::vector<std::uint8_t>& pred, std::size_t K) {
  std::vector<std::vector<std::size_t>> m(K, std::vector<std::size_t>(K, 0));
  for (std::size_t i = 0; i < truth.size(); ++i)
    if (truth[i] != kIgnoreLabel && pred[i] != kIgnoreLabel) ++m[truth[i]][pred[i]];
  return m;
}

}  // namespace agmm::oracle
