// Copyright 2026 The Morphix Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "morphix/audio.hpp"
#include "morphix/binary_io.hpp"
#include "morphix/error.hpp"
#include "morphix/mask.hpp"

namespace morphix {

inline constexpr std::size_t kEmbeddingDim = 64;

/// Per-frame log band energies over 64 uniform bands of the bins.
inline std::vector<Eigen::VectorXd> frame_embeddings(const Spectrogram& s) {
  s.validate();
  require(s.bins >= kEmbeddingDim, ErrorKind::invalid_argument, "embedding needs at least 64 bins");
  const auto mag = magnitudes(s);
  std::vector<Eigen::VectorXd> out;
  out.reserve(s.frames);
  for (std::size_t t = 0; t < s.frames; ++t) {
    Eigen::VectorXd e(kEmbeddingDim);
    for (std::size_t b = 0; b < kEmbeddingDim; ++b) {
      const std::size_t lo = b * s.bins / kEmbeddingDim, hi = (b + 1) * s.bins / kEmbeddingDim;
      double acc = 0.0;
      for (std::size_t f = lo; f < hi; ++f) acc += mag[t * s.bins + f] * mag[t * s.bins + f];
      e[static_cast<Eigen::Index>(b)] = std::log(acc / static_cast<double>(hi - lo) + 1e-10);
    }
    out.push_back(std::move(e));
  }
  return out;
}

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;

  void validate() const {
    require(mean.size() > 0 && cov.rows() == mean.size() && cov.cols() == mean.size(), ErrorKind::shape_mismatch,
            "gaussian stats dims mismatch");
    require(mean.allFinite() && cov.allFinite(), ErrorKind::invalid_argument, "gaussian stats not finite");
    require((cov - cov.transpose()).cwiseAbs().maxCoeff() <= 1e-9 * std::max(1.0, cov.cwiseAbs().maxCoeff()),
            ErrorKind::invalid_argument, "covariance not symmetric");
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov, Eigen::EigenvaluesOnly);
    require(es.eigenvalues().minCoeff() >= -1e-9 * std::max(1.0, cov.cwiseAbs().maxCoeff()),
            ErrorKind::invalid_argument, "covariance not positive semidefinite");
  }
};

/// Sample mean and unbiased covariance of at least two vectors.
inline GaussianStats fit_gaussian(const std::vector<Eigen::VectorXd>& xs) {
  require(xs.size() >= 2, ErrorKind::invalid_argument, "need at least two samples for covariance");
  const auto d = xs.front().size();
  GaussianStats g{Eigen::VectorXd::Zero(d), Eigen::MatrixXd::Zero(d, d)};
  for (const auto& x : xs) g.mean += x;
  g.mean /= static_cast<double>(xs.size());
  for (const auto& x : xs) {
    const Eigen::VectorXd c = x - g.mean;
    g.cov.noalias() += c * c.transpose();
  }
  g.cov /= static_cast<double>(xs.size() - 1);
  g.cov = 0.5 * (g.cov + g.cov.transpose());
  return g;
}

namespace detail {

inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& a) {
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
  const Eigen::VectorXd r = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * r.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

/// |mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}); the trace of the
/// cross term is taken as tr((S_a^{1/2} S_b S_a^{1/2})^{1/2}).
inline double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  a.validate();
  b.validate();
  require(a.mean.size() == b.mean.size(), ErrorKind::shape_mismatch, "gaussian dims differ");
  const Eigen::MatrixXd ra = detail::psd_sqrt(a.cov);
  Eigen::MatrixXd m = ra * b.cov * ra;
  m = 0.5 * (m + m.transpose());
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
  const double cross = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * cross;
  return std::max(0.0, d);
}

inline constexpr double kKlLoading = 1e-6;

/// KL(a || b) between Gaussians after adding lambda I to both covariances.
inline double kl_divergence(const GaussianStats& a, const GaussianStats& b, double lambda = kKlLoading) {
  a.validate();
  b.validate();
  require(a.mean.size() == b.mean.size(), ErrorKind::shape_mismatch, "gaussian dims differ");
  const auto k = a.mean.size();
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(k, k);
  const Eigen::LLT<Eigen::MatrixXd> la(a.cov + lambda * I), lb(b.cov + lambda * I);
  require(la.info() == Eigen::Success && lb.info() == Eigen::Success, ErrorKind::compute,
          "covariance singular after loading");
  const Eigen::VectorXd dm = b.mean - a.mean;
  const double tr = lb.solve(a.cov + lambda * I).trace();
  const double quad = dm.dot(lb.solve(dm));
  const double logdet_a = 2.0 * la.matrixL().toDenseMatrix().diagonal().array().log().sum();
  const double logdet_b = 2.0 * lb.matrixL().toDenseMatrix().diagonal().array().log().sum();
  return std::max(0.0, 0.5 * (tr + quad - static_cast<double>(k) + logdet_b - logdet_a));
}

struct RegionDistance {
  double masked = 0.0;
  double unmasked = 0.0;
};

/// RMS log-magnitude difference inside and outside the mask (0 for an empty side).
inline RegionDistance masked_spectral_distance(const Spectrogram& a, const Spectrogram& b, const TFMask& m) {
  require(a.frames == b.frames && a.bins == b.bins, ErrorKind::shape_mismatch, "spectrogram dims differ");
  require(m.time_len() == a.frames && m.freq_len() == a.bins, ErrorKind::shape_mismatch, "mask dims differ");
  double in = 0.0, out = 0.0;
  std::size_t nin = 0, nout = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const double d = static_cast<double>(a.values[i]) - b.values[i];
    if (m.flat(i)) {
      in += d * d;
      ++nin;
    } else {
      out += d * d;
      ++nout;
    }
  }
  return {nin ? std::sqrt(in / nin) : 0.0, nout ? std::sqrt(out / nout) : 0.0};
}

/// RMS of the values inside (or outside) the mask.
inline double region_rms(const Spectrogram& a, const TFMask& m, bool inside) {
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    if (m.flat(i) != inside) continue;
    acc += static_cast<double>(a.values[i]) * a.values[i];
    ++n;
  }
  return n ? std::sqrt(acc / n) : 0.0;
}

// ---- synthetic edit benchmark ------------------------------------------------

/// Geometry of generated spectrograms.
struct EditsetGeometry {
  std::uint32_t frames = 64;
  std::uint32_t n_fft = 128;
  std::uint32_t hop = 32;
  std::uint32_t sample_rate = 8000;
  std::uint32_t bins() const { return n_fft / 2 + 1; }
};

struct EditTriple {
  std::string id;
  std::string kind;  // add, remove, replace, move, stretch, pitch_shift
  Spectrogram source;
  std::optional<Spectrogram> reference;
  std::optional<Spectrogram> reference_in;
  Spectrogram target;
  TFMask mask_c;
  std::optional<TFMask> mask_r;
  std::optional<TFMask> mask_r_in;
  std::optional<MaskTransform> transform;
  TFMask changed;  // every cell the edit is expected to touch
};

namespace detail {

struct Rect {
  std::size_t t0, t1, f0, f1;
};

/// Additive magnitude field of one event confined to a rectangle.
struct Event {
  Rect box;
  std::vector<double> mag;  // frames x bins, zero outside box
};

class EditsetBuilder {
 public:
  EditsetBuilder(EditsetGeometry g, std::uint64_t seed) : g_(g), rng_(seed) {}

  std::vector<double> background() {
    std::uniform_real_distribution<double> u(0.8, 1.2);
    std::vector<double> m(cells());
    for (auto& v : m) v = 1e-3 * u(rng_);
    return m;
  }

  // 4-aligned rectangle inside the first 4-divisible block, avoiding `avoid`.
  Rect rect(std::optional<Rect> avoid = std::nullopt, std::size_t max_t = 0, std::size_t max_f = 0) {
    const std::size_t T = g_.frames / 4 * 4, F = g_.bins() / 4 * 4;
    const std::size_t lt_hi = max_t ? max_t : 5, lf_hi = max_f ? max_f : 4;
    for (;;) {
      const std::size_t lt = 4 * pick(2, lt_hi), lf = 4 * pick(1, lf_hi);
      const std::size_t t0 = 4 * pick(0, (T - lt) / 4), f0 = 4 * pick(0, (F - lf) / 4);
      const Rect r{t0, t0 + lt, f0, f0 + lf};
      if (avoid && overlaps(r, *avoid)) continue;
      return r;
    }
  }

  Event event(const Rect& r) {
    Event e{r, std::vector<double>(cells(), 0.0)};
    std::uniform_real_distribution<double> amp(0.5, 2.0), jitter(0.7, 1.3);
    const int style = static_cast<int>(pick(0, 2));
    const double a = amp(rng_);
    for (std::size_t t = r.t0; t < r.t1; ++t)
      for (std::size_t f = r.f0; f < r.f1; ++f) {
        double v = 0.0;
        const double ft = static_cast<double>(f - r.f0), tt = static_cast<double>(t - r.t0);
        const double wf = static_cast<double>(r.f1 - r.f0), wt = static_cast<double>(r.t1 - r.t0);
        if (style == 0) v = ft == std::floor(wf / 2) ? a : 0.05 * a;                       // tone
        else if (style == 1) v = std::abs(ft - tt * wf / wt) < 1.5 ? a : 0.05 * a;          // chirp
        else v = a * jitter(rng_) * 0.5;                                                   // noise band
        e.mag[t * g_.bins() + f] = v;
      }
    return e;
  }

  // Event copied into a new rectangle by nearest-neighbor box mapping.
  Event place(const Event& e, const Rect& to) const {
    Event out{to, std::vector<double>(cells(), 0.0)};
    const std::size_t lt = e.box.t1 - e.box.t0, lf = e.box.f1 - e.box.f0;
    const std::size_t nt = to.t1 - to.t0, nf = to.f1 - to.f0;
    for (std::size_t t = to.t0; t < to.t1; ++t)
      for (std::size_t f = to.f0; f < to.f1; ++f) {
        const std::size_t st = e.box.t0 + ((2 * (t - to.t0) + 1) * lt) / (2 * nt);
        const std::size_t sf = e.box.f0 + ((2 * (f - to.f0) + 1) * lf) / (2 * nf);
        out.mag[t * g_.bins() + f] = e.mag[st * g_.bins() + sf];
      }
    return out;
  }

  Spectrogram compose(const std::vector<double>& bg, std::initializer_list<const Event*> events) const {
    Spectrogram s{g_.frames, g_.bins(), g_.hop, g_.n_fft, g_.sample_rate, std::vector<float>(cells())};
    for (std::size_t i = 0; i < cells(); ++i) {
      double m = bg[i];
      for (const auto* e : events) m += e->mag[i];
      s.values[i] = static_cast<float>(std::log(m + kLogFloor));
    }
    return s;
  }

  TFMask mask(const Rect& r) const {
    TFMask m(g_.frames, g_.bins());
    m.fill_rect(r.t0, r.t1, r.f0, r.f1);
    return m;
  }

  std::size_t pick(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng_);
  }

  const EditsetGeometry& geometry() const { return g_; }

 private:
  static bool overlaps(const Rect& a, const Rect& b) {
    return a.t0 < b.t1 && b.t0 < a.t1 && a.f0 < b.f1 && b.f0 < a.f1;
  }
  std::size_t cells() const { return std::size_t{g_.frames} * g_.bins(); }

  EditsetGeometry g_;
  std::mt19937_64 rng_;
};

inline TFMask mask_union(const TFMask& a, const TFMask& b) {
  TFMask out = a;
  for (std::size_t t = 0; t < a.time_len(); ++t)
    for (std::size_t f = 0; f < a.freq_len(); ++f)
      if (b.get(t, f)) out.set(t, f);
  return out;
}

}  // namespace detail

/// Procedural (source, reference, target) triples, cycling through the six
/// edit kinds. Events are composed in the magnitude domain, so each target is
/// the exact documented composition of its inputs.
inline std::vector<EditTriple> make_synthetic_editset(std::uint64_t seed, std::size_t n, EditsetGeometry g = {}) {
  require(n >= 1, ErrorKind::invalid_argument, "editset size must be >= 1");
  static constexpr const char* kKinds[] = {"add", "remove", "replace", "move", "stretch", "pitch_shift"};
  detail::EditsetBuilder b(g, seed);
  std::vector<EditTriple> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    EditTriple tr;
    tr.kind = kKinds[i % 6];
    tr.id = std::to_string(i) + "_" + tr.kind;
    const auto bg = b.background();
    const auto r_keep = b.rect();
    const auto keep = b.event(r_keep);
    if (tr.kind == "add") {
      const auto r_ref = b.rect();
      const auto ev = b.event(r_ref);
      const auto r_dst = b.rect(r_keep);
      const auto placed = b.place(ev, r_dst);
      tr.source = b.compose(bg, {&keep});
      tr.reference = b.compose(b.background(), {&ev});
      tr.target = b.compose(bg, {&keep, &placed});
      tr.mask_c = b.mask(r_dst);
      tr.mask_r = b.mask(r_ref);
      tr.changed = tr.mask_c;
    } else if (tr.kind == "remove" || tr.kind == "replace") {
      const auto r_ev = b.rect(r_keep);
      const auto ev = b.event(r_ev);
      const auto r_ref = b.rect();
      const auto ev_ref = b.place(ev, r_ref);
      tr.source = b.compose(bg, {&keep, &ev});
      tr.reference = b.compose(b.background(), {&ev_ref});
      tr.mask_c = b.mask(r_ev);
      tr.mask_r = b.mask(r_ref);
      tr.changed = tr.mask_c;
      if (tr.kind == "remove") {
        tr.target = b.compose(bg, {&keep});
      } else {
        const auto r_in = b.rect();
        const auto ev_in = b.event(r_in);
        const auto placed = b.place(ev_in, r_ev);
        tr.reference_in = b.compose(b.background(), {&ev_in});
        tr.mask_r_in = b.mask(r_in);
        tr.target = b.compose(bg, {&keep, &placed});
      }
    } else {
      const std::size_t T = g.frames / 4 * 4, F = g.bins() / 4 * 4;
      detail::Rect r_ev{}, r_new{};
      for (;;) {
        r_ev = b.rect(r_keep, 4, 3);
        const long lt = static_cast<long>(r_ev.t1 - r_ev.t0);
        if (tr.kind == "move") {
          const long shift = 4 * static_cast<long>(b.pick(1, 3)) * (b.pick(0, 1) ? 1 : -1);
          tr.transform = MaskTransform::translate_time(shift);
          r_new = {r_ev.t0 + shift, r_ev.t1 + shift, r_ev.f0, r_ev.f1};
          if (static_cast<long>(r_ev.t0) + shift < 0 || r_ev.t1 + shift > T) continue;
        } else if (tr.kind == "pitch_shift") {
          const long shift = 4 * static_cast<long>(b.pick(1, 2)) * (b.pick(0, 1) ? 1 : -1);
          tr.transform = MaskTransform::translate_freq(shift);
          r_new = {r_ev.t0, r_ev.t1, r_ev.f0 + shift, r_ev.f1 + shift};
          if (static_cast<long>(r_ev.f0) + shift < 0 || r_ev.f1 + shift > F) continue;
        } else {
          const double k = b.pick(0, 1) ? 2.0 : 0.5;
          tr.transform = MaskTransform::scale_time(k);
          const long nl = std::lround(static_cast<double>(lt) * k);
          const long nt0 = std::lround(0.5 * static_cast<double>(r_ev.t0 + r_ev.t1) - 0.5 * static_cast<double>(nl));
          if (nt0 < 0 || nt0 + nl > static_cast<long>(T) || nt0 % 4 != 0 || nl % 4 != 0) continue;
          r_new = {static_cast<std::size_t>(nt0), static_cast<std::size_t>(nt0 + nl), r_ev.f0, r_ev.f1};
        }
        const TFMask moved = b.mask(r_new);
        bool clash = false;
        for (std::size_t t = r_keep.t0; t < r_keep.t1 && !clash; ++t)
          for (std::size_t f = r_keep.f0; f < r_keep.f1; ++f) clash = clash || moved.get(t, f);
        if (!clash) break;
      }
      const auto ev = b.event(r_ev);
      const auto placed = b.place(ev, r_new);
      tr.source = b.compose(bg, {&keep, &ev});
      tr.target = b.compose(bg, {&keep, &placed});
      tr.mask_c = b.mask(r_ev);
      tr.changed = detail::mask_union(tr.mask_c, b.mask(r_new));
    }
    out.push_back(std::move(tr));
  }
  return out;
}

/// Writes one directory per triple plus a top-level manifest.json.
inline void write_editset(const std::filesystem::path& dir, const std::vector<EditTriple>& set) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& tr : set) {
    const auto d = dir / tr.id;
    std::filesystem::create_directories(d);
    nlohmann::json m = {{"id", tr.id}, {"kind", tr.kind}, {"source", "source.spg"}, {"target", "target.spg"},
                        {"mask_c", "mask_c.json"}, {"changed", "changed.json"}};
    save_spectrogram(d / "source.spg", tr.source);
    save_spectrogram(d / "target.spg", tr.target);
    io::write_text_atomic(d / "mask_c.json", mask_to_json(tr.mask_c).dump());
    io::write_text_atomic(d / "changed.json", mask_to_json(tr.changed).dump());
    if (tr.reference) {
      save_spectrogram(d / "reference.spg", *tr.reference);
      m["reference"] = "reference.spg";
    }
    if (tr.reference_in) {
      save_spectrogram(d / "reference_in.spg", *tr.reference_in);
      m["reference_in"] = "reference_in.spg";
    }
    if (tr.mask_r) {
      io::write_text_atomic(d / "mask_r.json", mask_to_json(*tr.mask_r).dump());
      m["mask_r"] = "mask_r.json";
    }
    if (tr.mask_r_in) {
      io::write_text_atomic(d / "mask_r_in.json", mask_to_json(*tr.mask_r_in).dump());
      m["mask_r_in"] = "mask_r_in.json";
    }
    if (tr.transform) m["transform"] = transform_to_json(*tr.transform);
    io::write_text_atomic(d / "manifest.json", m.dump(2));
    manifest.push_back(m);
  }
  io::write_text_atomic(dir / "manifest.json", manifest.dump(2));
}

inline std::vector<EditTriple> read_editset(const std::filesystem::path& dir) {
  std::vector<EditTriple> out;
  nlohmann::json manifest;
  try {
    const auto bytes = io::read_file(dir / "manifest.json");
    manifest = nlohmann::json::parse(bytes.begin(), bytes.end());
    for (const auto& m : manifest) {
      const auto d = dir / m.at("id").get<std::string>();
      auto mask = [&](const char* key) {
        const auto b = io::read_file(d / m.at(key).get<std::string>());
        return mask_from_json(nlohmann::json::parse(b.begin(), b.end()));
      };
      EditTriple tr;
      tr.id = m.at("id").get<std::string>();
      tr.kind = m.at("kind").get<std::string>();
      tr.source = load_spectrogram(d / m.at("source").get<std::string>());
      tr.target = load_spectrogram(d / m.at("target").get<std::string>());
      tr.mask_c = mask("mask_c");
      tr.changed = mask("changed");
      if (m.contains("reference")) tr.reference = load_spectrogram(d / m.at("reference").get<std::string>());
      if (m.contains("reference_in")) tr.reference_in = load_spectrogram(d / m.at("reference_in").get<std::string>());
      if (m.contains("mask_r")) tr.mask_r = mask("mask_r");
      if (m.contains("mask_r_in")) tr.mask_r_in = mask("mask_r_in");
      if (m.contains("transform")) tr.transform = transform_from_json(m.at("transform"));
      out.push_back(std::move(tr));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, std::string("editset manifest: ") + e.what());
  }
  return out;
}

}  // namespace morphix
