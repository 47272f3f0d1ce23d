#pragma once

// Brute-force reference implementations used as independent oracles in the
// test suites. Everything here works on plain std::vector<double> and stays
// deliberately naive: straight loops, no shared code with the library path
// under test.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

namespace oracle {

inline std::vector<double> matmul(const std::vector<double>& a, int m, int k, const std::vector<double>& b, int n) {
  std::vector<double> c(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  return c;
}

// x [T x Cin], w [K x Cin x Cout], bias [Cout]; zero padding.
inline std::vector<double> conv1d(const std::vector<double>& x, int t, int cin, const std::vector<double>& w, int k,
                                  int cout, const std::vector<double>& bias, int stride, int padding) {
  int tout = (t + 2 * padding - k) / stride + 1;
  std::vector<double> y(static_cast<std::size_t>(tout) * cout, 0.0);
  for (int to = 0; to < tout; ++to)
    for (int co = 0; co < cout; ++co) {
      double s = bias[co];
      for (int kk = 0; kk < k; ++kk) {
        int ti = to * stride + kk - padding;
        if (ti < 0 || ti >= t) continue;
        for (int ci = 0; ci < cin; ++ci) s += x[ti * cin + ci] * w[(kk * cin + ci) * cout + co];
      }
      y[to * cout + co] = s;
    }
  return y;
}

inline double gelu_scalar(double x) {
  const double c = 0.7978845608028654;
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

// Sum over modalities of mean squared difference, each averaged over T*d_j.
inline double l_pmg(const std::vector<std::vector<double>>& pred, const std::vector<std::vector<double>>& target) {
  double total = 0.0;
  for (std::size_t j = 0; j < pred.size(); ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < pred[j].size(); ++i) {
      double d = pred[j][i] - target[j][i];
      s += d * d;
    }
    total += s / static_cast<double>(pred[j].size());
  }
  return total;
}

inline std::vector<double> cosine_sim_matrix(const std::vector<double>& a, const std::vector<double>& b, int t,
                                             int h) {
  std::vector<double> s(static_cast<std::size_t>(t) * t, 0.0);
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < t; ++j) {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (int k = 0; k < h; ++k) {
        dot += a[i * h + k] * b[j * h + k];
        na += a[i * h + k] * a[i * h + k];
        nb += b[j * h + k] * b[j * h + k];
      }
      double denom = std::max(std::sqrt(na), 1e-12) * std::max(std::sqrt(nb), 1e-12);
      s[i * t + j] = dot / denom;
    }
  return s;
}

// Bi-directional snippet-level InfoNCE with the positive pair included in
// the denominator.
inline double infonce_bidirectional(const std::vector<double>& a, const std::vector<double>& b, int t, int h,
                                    double tau) {
  auto s = cosine_sim_matrix(a, b, t, h);
  double dir1 = 0.0, dir2 = 0.0;
  for (int i = 0; i < t; ++i) {
    double denom = 0.0;
    for (int k = 0; k < t; ++k) denom += std::exp(s[i * t + k] / tau);
    dir1 += -std::log(std::exp(s[i * t + i] / tau) / denom);
    double denc = 0.0;
    for (int k = 0; k < t; ++k) denc += std::exp(s[k * t + i] / tau);
    dir2 += -std::log(std::exp(s[i * t + i] / tau) / denc);
  }
  return 0.5 * (dir1 / t + dir2 / t);
}

inline double l_distill(const std::vector<double>& student, const std::vector<double>& teacher) {
  double s = 0.0;
  for (std::size_t i = 0; i < student.size(); ++i) {
    double d = student[i] - teacher[i];
    s += d * d;
  }
  return s / static_cast<double>(student.size());
}

// MIL: sigmoid scores, top-k mean per video (k = floor(T/16) + 1), clamped BCE
// against the video label, averaged over the batch.
inline double l_mil(const std::vector<std::vector<double>>& logits, const std::vector<int>& labels) {
  double total = 0.0;
  for (std::size_t v = 0; v < logits.size(); ++v) {
    int t = static_cast<int>(logits[v].size());
    int k = t / 16 + 1;
    std::vector<double> scores(logits[v].size());
    for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = 1.0 / (1.0 + std::exp(-logits[v][i]));
    std::vector<int> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int x, int y) { return scores[x] > scores[y]; });
    double vs = 0.0;
    for (int i = 0; i < k; ++i) vs += scores[order[i]];
    vs /= k;
    double p = std::min(std::max(vs, 1e-7), 1.0 - 1e-7);
    total += labels[v] ? -std::log(p) : -std::log(1.0 - p);
  }
  return total / static_cast<double>(logits.size());
}

// ROC AUC as the pairwise probability P(score_pos > score_neg) + 0.5 P(tie).
inline double auc_pairwise(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0.0;
  long long pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!labels[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j]) continue;
      ++pairs;
      if (scores[i] > scores[j])
        wins += 1.0;
      else if (scores[i] == scores[j])
        wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

// Average precision by explicit threshold enumeration over distinct scores.
inline double ap_threshold(const std::vector<double>& scores, const std::vector<int>& labels) {
  std::vector<double> uniq = scores;
  std::sort(uniq.begin(), uniq.end(), std::greater<double>());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  int total_pos = 0;
  for (int l : labels) total_pos += l;
  double ap = 0.0, prev_recall = 0.0;
  for (double th : uniq) {
    int tp = 0, fp = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i] >= th) {
        if (labels[i])
          ++tp;
        else
          ++fp;
      }
    }
    double precision = static_cast<double>(tp) / (tp + fp);
    double recall = static_cast<double>(tp) / total_pos;
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return ap;
}

}  // namespace oracle
