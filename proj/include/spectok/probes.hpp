#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "spectok/errors.hpp"
#include "spectok/format.hpp"
#include "spectok/model.hpp"
#include "spectok/rng.hpp"

namespace spectok {

// ==================== Cosine statistics ====================

// Cosine similarity; either vector all-zero yields 0 by convention.
inline double cosine(const std::vector<double>& a, std::size_t ia,
                     const std::vector<double>& b, std::size_t ib,
                     std::size_t d) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    double x = a[ia * d + i];
    double y = b[ib * d + i];
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

struct SimStats {
  double cls_patch_mean = 0.0;
  double cls_patch_std = 0.0;
  std::size_t cls_patch_count = 0;
  double patch_patch_mean = 0.0;
  double patch_patch_std = 0.0;
  std::size_t patch_patch_count = 0;
};

// Patch pairs: exhaustive below this many patches, seeded sampling above.
inline constexpr std::size_t kMaxExhaustivePatches = 1024;
inline constexpr std::size_t kSampledPairs = 100000;
inline constexpr std::uint64_t kPairSampleSeed = 0x5eedfa11;

namespace detail {

struct RunningStats {
  double sum = 0.0;
  double sum_sq = 0.0;
  std::size_t n = 0;

  void add(double v) {
    sum += v;
    sum_sq += v * v;
    ++n;
  }
  double mean() const { return n ? sum / static_cast<double>(n) : 0.0; }
  double stddev() const {
    if (n == 0) return 0.0;
    double m = mean();
    double v = sum_sq / static_cast<double>(n) - m * m;
    return std::sqrt(std::max(v, 0.0));  // population std
  }
};

}  // namespace detail

// Pools cls-to-patch and patch-to-patch cosine similarities at one activation
// point over the given blocks of every trace. Patch pairs are exhaustive
// (all unordered pairs) up to kMaxExhaustivePatches patches, then a fixed
// seeded sample of kSampledPairs index pairs per record (repeats possible).
inline SimStats cosine_stats(const std::vector<ProbeTrace>& traces,
                             std::string_view point,
                             const std::vector<int>& blocks) {
  if (traces.empty()) throw ContractError("cosine_stats: no traces");
  if (blocks.empty()) throw ContractError("cosine_stats: no blocks selected");
  detail::RunningStats cp, pp;
  for (const ProbeTrace& trace : traces) {
    const auto patch_rows = trace.partition.patch_only_rows();
    const std::size_t p = patch_rows.size();
    for (int block : blocks) {
      const ProbeRecord& rec = trace.at(block, point);
      const std::size_t d = rec.shape[1];
      for (std::size_t j : patch_rows) {
        cp.add(cosine(rec.data, TokenPartition::kClsRow, rec.data, j, d));
      }
      if (p <= kMaxExhaustivePatches) {
        for (std::size_t a = 0; a < p; ++a) {
          for (std::size_t b = a + 1; b < p; ++b) {
            pp.add(cosine(rec.data, patch_rows[a], rec.data, patch_rows[b], d));
          }
        }
      } else {
        Rng rng(kPairSampleSeed);
        for (std::size_t s = 0; s < kSampledPairs; ++s) {
          std::size_t a = rng.next_below(p);
          std::size_t b = rng.next_below(p - 1);
          if (b >= a) ++b;
          pp.add(cosine(rec.data, patch_rows[a], rec.data, patch_rows[b], d));
        }
      }
    }
  }
  SimStats out;
  out.cls_patch_mean = cp.mean();
  out.cls_patch_std = cp.stddev();
  out.cls_patch_count = cp.n;
  out.patch_patch_mean = pp.mean();
  out.patch_patch_std = pp.stddev();
  out.patch_patch_count = pp.n;
  return out;
}

// ==================== Top-magnitude dimensions ====================

struct TopDims {
  // (dimension, mean absolute activation), sorted descending; ties resolve
  // to the lower dimension index.
  std::vector<std::pair<int, double>> cls;
  std::vector<std::pair<int, double>> patch;
};

inline TopDims top_magnitude_dims(const ProbeTrace& trace, int block, int k) {
  const ProbeRecord& rec = trace.at(block, "block_out");
  const std::size_t d = rec.shape[1];
  if (k < 1 || static_cast<std::size_t>(k) > d) {
    throw ContractError("top_magnitude_dims: k " + std::to_string(k) +
                        " out of range for dim " + std::to_string(d));
  }
  auto rank = [&](const std::vector<std::size_t>& rows) {
    std::vector<std::pair<int, double>> mags(d);
    for (std::size_t i = 0; i < d; ++i) {
      double acc = 0.0;
      for (std::size_t r : rows) acc += std::fabs(rec.data[r * d + i]);
      mags[i] = {static_cast<int>(i), acc / static_cast<double>(rows.size())};
    }
    std::stable_sort(mags.begin(), mags.end(),
                     [](const auto& a, const auto& b) {
                       return a.second > b.second;
                     });
    mags.resize(k);
    return mags;
  };
  TopDims out;
  out.cls = rank({TokenPartition::kClsRow});
  out.patch = rank(trace.partition.patch_only_rows());
  return out;
}

// ==================== PCA ====================

namespace detail {

// Cyclic Jacobi eigensolver for a symmetric matrix. Returns eigenvalues in
// descending order with matching eigenvector columns.
inline void jacobi_eigen(std::vector<double> a, std::size_t d,
                         std::vector<double>& eigenvalues,
                         std::vector<double>& eigenvectors) {
  std::vector<double> v(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) v[i * d + i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < d; ++p) {
      for (std::size_t q = p + 1; q < d; ++q) off += a[p * d + q] * a[p * d + q];
    }
    if (off < 1e-26) break;
    for (std::size_t p = 0; p < d; ++p) {
      for (std::size_t q = p + 1; q < d; ++q) {
        double apq = a[p * d + q];
        if (std::fabs(apq) < 1e-300) continue;
        double tau = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
        double t = (tau >= 0.0 ? 1.0 : -1.0) /
                   (std::fabs(tau) + std::sqrt(1.0 + tau * tau));
        double c = 1.0 / std::sqrt(1.0 + t * t);
        double s = t * c;
        for (std::size_t i = 0; i < d; ++i) {
          double aip = a[i * d + p];
          double aiq = a[i * d + q];
          a[i * d + p] = c * aip - s * aiq;
          a[i * d + q] = s * aip + c * aiq;
        }
        for (std::size_t i = 0; i < d; ++i) {
          double api = a[p * d + i];
          double aqi = a[q * d + i];
          a[p * d + i] = c * api - s * aqi;
          a[q * d + i] = s * api + c * aqi;
        }
        for (std::size_t i = 0; i < d; ++i) {
          double vip = v[i * d + p];
          double viq = v[i * d + q];
          v[i * d + p] = c * vip - s * viq;
          v[i * d + q] = s * vip + c * viq;
        }
      }
    }
  }
  std::vector<std::size_t> order(d);
  for (std::size_t i = 0; i < d; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    return a[x * d + x] > a[y * d + y];
  });
  eigenvalues.resize(d);
  eigenvectors.assign(d * d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    eigenvalues[j] = a[order[j] * d + order[j]];
    for (std::size_t i = 0; i < d; ++i) {
      eigenvectors[i * d + j] = v[i * d + order[j]];
    }
  }
}

}  // namespace detail

struct PcaResult {
  std::size_t rows = 0;
  std::size_t components = 0;       // min(3, d)
  std::vector<double> projection;   // [rows, components]
  std::vector<double> directions;   // [d, components], orthonormal columns
  std::vector<double> eigenvalues;  // [components], descending
};

// Projects row vectors onto the top principal components of their covariance.
// Each component's sign is fixed so the projection's skewness is nonnegative
// (first nonzero direction entry positive when skewness ties at zero).
inline PcaResult pca_project(const std::vector<double>& data, std::size_t rows,
                             std::size_t d, std::size_t components = 3) {
  if (rows == 0 || d == 0) throw ContractError("pca_project: empty input");
  components = std::min(components, d);
  std::vector<double> mean(d, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < d; ++i) mean[i] += data[r * d + i];
  }
  for (double& m : mean) m /= static_cast<double>(rows);
  std::vector<double> centered(rows * d);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < d; ++i) {
      centered[r * d + i] = data[r * d + i] - mean[i];
    }
  }
  std::vector<double> cov(d * d, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < d; ++i) {
      double ci = centered[r * d + i];
      for (std::size_t j = i; j < d; ++j) {
        cov[i * d + j] += ci * centered[r * d + j];
      }
    }
  }
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i; j < d; ++j) {
      cov[i * d + j] /= static_cast<double>(rows);
      cov[j * d + i] = cov[i * d + j];
    }
  }
  std::vector<double> eigenvalues, eigenvectors;
  detail::jacobi_eigen(std::move(cov), d, eigenvalues, eigenvectors);

  PcaResult out;
  out.rows = rows;
  out.components = components;
  out.projection.assign(rows * components, 0.0);
  out.directions.assign(d * components, 0.0);
  out.eigenvalues.assign(eigenvalues.begin(), eigenvalues.begin() + components);
  for (std::size_t c = 0; c < components; ++c) {
    for (std::size_t r = 0; r < rows; ++r) {
      double acc = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        acc += centered[r * d + i] * eigenvectors[i * d + c];
      }
      out.projection[r * components + c] = acc;
    }
    double m3 = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      double p = out.projection[r * components + c];
      m3 += p * p * p;
    }
    bool flip = m3 < 0.0;
    if (m3 == 0.0) {
      for (std::size_t i = 0; i < d; ++i) {
        double e = eigenvectors[i * d + c];
        if (e != 0.0) {
          flip = e < 0.0;
          break;
        }
      }
    }
    double sign = flip ? -1.0 : 1.0;
    for (std::size_t r = 0; r < rows; ++r) {
      out.projection[r * components + c] *= sign;
    }
    for (std::size_t i = 0; i < d; ++i) {
      out.directions[i * components + c] = sign * eigenvectors[i * d + c];
    }
  }
  return out;
}

// Maps patch activations at (block, point) to one RGB triple per patch:
// first three principal components, each min-max scaled to [0, 1] on its own.
// A component with zero spread maps to 0.5.
inline std::vector<double> pca_rgb(const ProbeTrace& trace, int block,
                                   std::string_view point) {
  const ProbeRecord& rec = trace.at(block, point);
  const auto patch_rows = trace.partition.patch_only_rows();
  const std::size_t p = patch_rows.size();
  const std::size_t d = rec.shape[1];
  std::vector<double> patches(p * d);
  for (std::size_t r = 0; r < p; ++r) {
    std::copy_n(rec.data.begin() + patch_rows[r] * d, d,
                patches.begin() + r * d);
  }
  PcaResult pca = pca_project(patches, p, d, 3);
  std::vector<double> rgb(p * 3, 0.5);
  for (std::size_t c = 0; c < pca.components; ++c) {
    double lo = pca.projection[c];
    double hi = lo;
    for (std::size_t r = 1; r < p; ++r) {
      lo = std::min(lo, pca.projection[r * pca.components + c]);
      hi = std::max(hi, pca.projection[r * pca.components + c]);
    }
    for (std::size_t r = 0; r < p; ++r) {
      rgb[r * 3 + c] = hi > lo
          ? (pca.projection[r * pca.components + c] - lo) / (hi - lo)
          : 0.5;
    }
  }
  return rgb;
}

// ==================== LayerNorm separation demo ====================

struct LnSeparation {
  double pre_sim = 0.0;
  double post_sim = 0.0;
};

// Constructs tokens sharing a large zero-sum common-mode component (alternating
// +/-10 over the first half of the dimensions) plus small per-type blocks
// (magnitude 1, disjoint dims) and noise. The per-dimension gamma suppresses
// the shared dims to 0.01. Before the norm, the common mode dominates every
// cosine; after it, only the disjoint blocks and the mean offset survive, so
// class-patch similarity collapses.
inline LnSeparation ln_separation_demo(int d, int n_patches,
                                       std::uint64_t seed) {
  if (d < 4) throw ContractError("ln_separation_demo requires d >= 4");
  if (n_patches < 1) throw ContractError("ln_separation_demo requires patches");
  const std::size_t dim = d;
  const std::size_t shared = (dim / 2) & ~std::size_t{1};  // even, >= 2
  const std::size_t cls_lo = shared;
  const std::size_t cls_hi = shared + (dim - shared) / 2;

  Rng rng(seed);
  auto make_token = [&](bool is_cls) {
    std::vector<double> t(dim);
    for (std::size_t i = 0; i < dim; ++i) {
      double v = rng.normal(0.0, 0.02);
      if (i < shared) v += (i % 2 == 0) ? 10.0 : -10.0;
      bool in_cls_block = i >= cls_lo && i < cls_hi;
      bool in_patch_block = i >= cls_hi;
      if ((is_cls && in_cls_block) || (!is_cls && in_patch_block)) v += 1.0;
      t[i] = v;
    }
    return t;
  };

  std::vector<double> rows((1 + n_patches) * dim);
  {
    auto cls = make_token(true);
    std::copy(cls.begin(), cls.end(), rows.begin());
    for (int j = 0; j < n_patches; ++j) {
      auto patch = make_token(false);
      std::copy(patch.begin(), patch.end(), rows.begin() + (1 + j) * dim);
    }
  }

  std::vector<double> gamma_v(dim, 1.0);
  for (std::size_t i = 0; i < shared; ++i) gamma_v[i] = 0.01;
  Tensor x({static_cast<std::size_t>(1 + n_patches), dim}, rows);
  Tensor normed = layer_norm(x, Tensor({dim}, gamma_v), Tensor({dim}, 0.0));

  LnSeparation out;
  detail::RunningStats pre, post;
  for (int j = 1; j <= n_patches; ++j) {
    pre.add(cosine(x.data(), 0, x.data(), j, dim));
    post.add(cosine(normed.data(), 0, normed.data(), j, dim));
  }
  out.pre_sim = pre.mean();
  out.post_sim = post.mean();
  return out;
}

// ==================== Output writers ====================

struct StatsCsvRow {
  int block;
  std::string point;
  std::string population;  // "cls_patch" or "patch_patch"
  double mean;
  double stddev;
};

inline void write_stats_csv(std::ostream& os,
                            const std::vector<StatsCsvRow>& rows) {
  os << "block,point,population,mean,std\n";
  for (const auto& r : rows) {
    os << r.block << ',' << r.point << ',' << r.population << ','
       << detail::fmt_double(r.mean) << ',' << detail::fmt_double(r.stddev)
       << '\n';
  }
}

// Binary PPM (P6), 8 bits per channel, values rounded from [0, 1].
inline void write_ppm(const std::string& path, int width, int height,
                      const std::vector<double>& rgb) {
  if (rgb.size() != static_cast<std::size_t>(width) * height * 3) {
    throw ContractError("write_ppm: buffer size does not match " +
                        std::to_string(width) + "x" + std::to_string(height));
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << "P6\n" << width << ' ' << height << "\n255\n";
  for (double v : rgb) {
    double clamped = std::min(1.0, std::max(0.0, v));
    os.put(static_cast<char>(std::lround(clamped * 255.0)));
  }
  if (!os) throw IoError("write failed: " + path);
}

}  // namespace spectok
