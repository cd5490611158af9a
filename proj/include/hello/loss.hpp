#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "hello/common.hpp"
#include "hello/kernels.hpp"
#include "hello/tensor.hpp"

namespace hello {

// Space in which soft labels live and MSE terms are computed. One switch
// governs teacher averaging, the transfer MSE, and online student targets.
enum class LabelSpace { kLogit, kProb };

inline LabelSpace parse_space(const std::string& s) {
  if (s == "logit") return LabelSpace::kLogit;
  if (s == "prob") return LabelSpace::kProb;
  throw ConfigError("label space must be 'logit' or 'prob', got " + s);
}

inline const char* space_name(LabelSpace s) {
  return s == LabelSpace::kLogit ? "logit" : "prob";
}

// Representation of raw logits in the given space.
template <class T>
Tensor<T> to_space(const Tensor<T>& logits, LabelSpace space) {
  if (space == LabelSpace::kLogit) return logits;
  Tensor<T> out(logits.shape);
  kernels::par::softmax_rows<T>(logits.ptr(), out.ptr(), logits.dim(0),
                                logits.dim(1), T(1));
  return out;
}

// Mean squared error over all elements between repr(logits) and target
// (already in `space`). Adds weight * dL/dlogits into *dlogits when given.
template <class T>
double mse_in_space(const Tensor<T>& logits, const Tensor<T>& target,
                    LabelSpace space, Tensor<T>* dlogits, double weight) {
  require_shape(target, logits.shape, "mse target");
  int64_t n = logits.dim(0), c = logits.dim(1);
  double inv = 1.0 / static_cast<double>(n * c);
  double loss = 0.0;
  if (space == LabelSpace::kLogit) {
    for (int64_t i = 0; i < logits.numel(); ++i) {
      double d = static_cast<double>(logits[i]) - static_cast<double>(target[i]);
      loss += d * d;
      if (dlogits) (*dlogits)[i] += static_cast<T>(weight * 2.0 * d * inv);
    }
  } else {
    Tensor<T> s(logits.shape);
    kernels::par::softmax_rows<T>(logits.ptr(), s.ptr(), n, c, T(1));
    for (int64_t r = 0; r < n; ++r) {
      double dot = 0.0;  // sum_i g_i * s_i for the softmax Jacobian
      for (int64_t j = 0; j < c; ++j) {
        double d = static_cast<double>(s.at2(r, j)) - static_cast<double>(target.at2(r, j));
        loss += d * d;
        dot += 2.0 * d * inv * static_cast<double>(s.at2(r, j));
      }
      if (dlogits) {
        for (int64_t j = 0; j < c; ++j) {
          double g = 2.0 * (static_cast<double>(s.at2(r, j)) -
                            static_cast<double>(target.at2(r, j))) * inv;
          (*dlogits).at2(r, j) +=
              static_cast<T>(weight * static_cast<double>(s.at2(r, j)) * (g - dot));
        }
      }
    }
  }
  return loss * inv;
}

// Mean cross-entropy of softmax(logits / temp) against mixed hard targets
// lam*onehot(ya) + (1-lam)*onehot(yb). Pass yb = ya (or lam = 1) for the
// unmixed case. Adds weight * dL/dlogits into *dlogits when given.
template <class T>
double ce_softmax_mixed(const Tensor<T>& logits, const std::vector<int32_t>& ya,
                        const std::vector<int32_t>& yb, const std::vector<double>& lam,
                        double temp, Tensor<T>* dlogits, double weight) {
  int64_t n = logits.dim(0), c = logits.dim(1);
  if (static_cast<int64_t>(ya.size()) != n || static_cast<int64_t>(yb.size()) != n ||
      static_cast<int64_t>(lam.size()) != n)
    throw ValidationError("ce targets do not match batch size");
  if (temp <= 0.0) throw ValidationError("ce temperature must be positive");
  Tensor<T> p(logits.shape);
  kernels::par::softmax_rows<T>(logits.ptr(), p.ptr(), n, c, static_cast<T>(temp));
  double loss = 0.0;
  double inv = 1.0 / static_cast<double>(n);
  for (int64_t r = 0; r < n; ++r) {
    int32_t a = ya[static_cast<std::size_t>(r)];
    int32_t b = yb[static_cast<std::size_t>(r)];
    if (a < 0 || a >= c || b < 0 || b >= c)
      throw ValidationError("ce label out of range at row " + std::to_string(r));
    double l = lam[static_cast<std::size_t>(r)];
    double pa = std::max(static_cast<double>(p.at2(r, a)), 1e-300);
    double pb = std::max(static_cast<double>(p.at2(r, b)), 1e-300);
    loss += -(l * std::log(pa) + (1.0 - l) * std::log(pb));
    if (dlogits) {
      double scale = weight * inv / temp;
      for (int64_t j = 0; j < c; ++j) {
        double tgt = (j == a ? l : 0.0) + (j == b ? 1.0 - l : 0.0);
        (*dlogits).at2(r, j) +=
            static_cast<T>(scale * (static_cast<double>(p.at2(r, j)) - tgt));
      }
    }
  }
  return loss * inv;
}

template <class T>
double ce_softmax(const Tensor<T>& logits, const std::vector<int32_t>& y, double temp,
                  Tensor<T>* dlogits, double weight) {
  std::vector<double> lam(y.size(), 1.0);
  return ce_softmax_mixed(logits, y, y, lam, temp, dlogits, weight);
}

struct LossParts {
  double mse = 0.0;
  double ce = 0.0;
  double total = 0.0;
};

// MSE(repr(logits), y_soft) + ce_weight * CE(logits / temp, mixed hard
// targets): the shape shared by the transfer objective and the downstream
// student objective.
template <class T>
LossParts combined_loss(const Tensor<T>& logits, const Tensor<T>& y_soft,
                        const std::vector<int32_t>& ya, const std::vector<int32_t>& yb,
                        const std::vector<double>& lam, double ce_weight,
                        LabelSpace space, double temp, Tensor<T>* dlogits) {
  LossParts parts;
  parts.mse = mse_in_space(logits, y_soft, space, dlogits, 1.0);
  if (ce_weight > 0.0) {
    parts.ce = ce_softmax_mixed(logits, ya, yb, lam, temp, dlogits, ce_weight);
  } else {
    // Report the CE value without touching gradients.
    parts.ce = ce_softmax_mixed(logits, ya, yb, lam, temp,
                                static_cast<Tensor<T>*>(nullptr), 0.0);
  }
  parts.total = parts.mse + ce_weight * parts.ce;
  if (!std::isfinite(parts.total))
    throw TrainingError("non-finite loss (mse=" + num_str(parts.mse) +
                        ", ce=" + num_str(parts.ce) + ")");
  return parts;
}

// First-maximum argmax per row; deliberately matches the evaluation tie rule
// (lowest class index wins).
template <class T>
int64_t argmax_row(const Tensor<T>& m, int64_t row) {
  int64_t best = 0;
  for (int64_t j = 1; j < m.dim(1); ++j)
    if (m.at2(row, j) > m.at2(row, best)) best = j;
  return best;
}

}  // namespace hello
