#pragma once

#include "spdc/types.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <random>

namespace spdc {

struct TimeGrid {
  double T = 1.0;
  int n_steps = 64;

  double dt() const { return T / n_steps; }
  double t(int k) const { return T * double(k) / n_steps; }
  /// Cell (t_k, t_{k+1}] holding time t.
  int cell(double t) const {
    int k = int(std::ceil(t / dt())) - 1;
    return std::clamp(k, 0, n_steps - 1);
  }
};

inline TimeGrid make_time_grid(double T, int n_steps) {
  require(T > 0.0, "T must be positive");
  require(n_steps >= 1, "n_steps must be >= 1");
  return {T, n_steps};
}

struct JumpMeasureSpec {
  std::vector<double> marks;
  std::vector<double> weights;  // intensities pi_m

  int K() const { return int(marks.size()); }
  double total() const {
    double s = 0.0;
    for (double w : weights) s += w;
    return s;
  }
};

struct Jump {
  double t;
  int mark;
  int cell;
};

enum class StreamTag : std::uint64_t { W = 1, B = 2, N = 3, model = 7 };

/// Independent generator for a (seed, path, tag) triple.
inline std::mt19937_64 make_stream(std::uint64_t seed, std::uint64_t path, std::uint64_t tag) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(path),
                    std::uint32_t(path >> 32), std::uint32_t(tag), std::uint32_t(tag >> 32)};
  return std::mt19937_64(seq);
}

inline std::mt19937_64 make_stream(std::uint64_t seed, std::uint64_t path, StreamTag tag) {
  return make_stream(seed, path, std::uint64_t(tag));
}

/// Driving noise of one path. Column k of dW / dB / counts is grid cell k.
struct NoiseGrid {
  Mat dW;      // n_W x n_steps
  Mat dB;      // d x n_steps
  MatI counts; // K x n_steps, jumps per cell and mark
  std::vector<Jump> jumps;
  std::uint64_t seed = 0;
  std::int64_t path_index = 0;

  int n_steps() const { return int(dW.cols()); }
  int n_W() const { return int(dW.rows()); }
  int d() const { return int(dB.rows()); }
  int K() const { return int(counts.rows()); }
};

inline void rebuild_counts(NoiseGrid& ng) {
  ng.counts.setZero();
  for (const auto& j : ng.jumps) ng.counts(j.mark, j.cell) += 1;
}

inline NoiseGrid sample_noise(const TimeGrid& grid, int n_W, int d, const JumpMeasureSpec& jm,
                              std::uint64_t seed, std::int64_t path_index) {
  require(n_W >= 1 && d >= 1, "sample_noise: n_W and d must be >= 1");
  const int N = grid.n_steps;
  const double sq = std::sqrt(grid.dt());
  NoiseGrid ng;
  ng.seed = seed;
  ng.path_index = path_index;
  ng.dW.resize(n_W, N);
  ng.dB.resize(d, N);
  {
    auto g = make_stream(seed, path_index, StreamTag::W);
    std::normal_distribution<double> nd;
    for (int k = 0; k < N; ++k)
      for (int i = 0; i < n_W; ++i) ng.dW(i, k) = sq * nd(g);
  }
  {
    auto g = make_stream(seed, path_index, StreamTag::B);
    std::normal_distribution<double> nd;
    for (int k = 0; k < N; ++k)
      for (int j = 0; j < d; ++j) ng.dB(j, k) = sq * nd(g);
  }
  ng.counts = MatI::Zero(jm.K(), N);
  for (int m = 0; m < jm.K(); ++m) {
    if (jm.weights[m] <= 0.0) continue;
    auto g = make_stream(seed, path_index, std::uint64_t(StreamTag::N) + 16 * std::uint64_t(m + 1));
    std::exponential_distribution<double> ex(jm.weights[m]);
    double t = ex(g);
    while (t <= grid.T) {
      ng.jumps.push_back({t, m, grid.cell(t)});
      t += ex(g);
    }
  }
  std::sort(ng.jumps.begin(), ng.jumps.end(), [](const Jump& a, const Jump& b) { return a.t < b.t; });
  rebuild_counts(ng);
  return ng;
}

struct NoisePerturbation {
  enum class Kind { gaussian_W, gaussian_B, add_jump };
  Kind kind = Kind::gaussian_W;
  int step = 0;
  int index = 0;  // mode i, component j or mark m
  double h = 0.0;
  double t = 0.0;

  static NoisePerturbation W(int k, int i, double h) { return {Kind::gaussian_W, k, i, h, 0.0}; }
  static NoisePerturbation B(int k, int j, double h) { return {Kind::gaussian_B, k, j, h, 0.0}; }
  static NoisePerturbation jump(double t, int m) { return {Kind::add_jump, 0, m, 0.0, t}; }
};

inline void perturb_in_place(NoiseGrid& ng, const NoisePerturbation& p, const TimeGrid& grid) {
  using K = NoisePerturbation::Kind;
  if (p.kind == K::gaussian_W || p.kind == K::gaussian_B) {
    Mat& m = p.kind == K::gaussian_W ? ng.dW : ng.dB;
    if (p.step < 0 || p.step >= m.cols() || p.index < 0 || p.index >= m.rows())
      throw std::out_of_range("apply_perturbation: slot out of range");
    require(p.h != 0.0, "apply_perturbation: bump must be non-zero");
    m(p.index, p.step) += p.h;
    return;
  }
  if (p.index < 0 || p.index >= ng.K()) throw std::out_of_range("apply_perturbation: mark out of range");
  if (!(p.t > 0.0 && p.t <= grid.T)) throw std::out_of_range("apply_perturbation: jump time out of range");
  Jump j{p.t, p.index, grid.cell(p.t)};
  auto it = std::upper_bound(ng.jumps.begin(), ng.jumps.end(), j.t,
                             [](double t, const Jump& a) { return t < a.t; });
  ng.jumps.insert(it, j);
  ng.counts(j.mark, j.cell) += 1;
}

inline NoiseGrid apply_perturbation(const NoiseGrid& ng, const NoisePerturbation& p, const TimeGrid& grid) {
  NoiseGrid out = ng;
  perturb_in_place(out, p, grid);
  return out;
}

/// dB'_k = dB_k + h_k dt, h_path is d x n_steps.
inline NoiseGrid girsanov_shift(const NoiseGrid& ng, const Mat& h_path, double dt) {
  if (h_path.rows() != ng.dB.rows() || h_path.cols() != ng.dB.cols())
    throw std::invalid_argument("girsanov_shift: shape mismatch");
  NoiseGrid out = ng;
  out.dB += dt * h_path;
  return out;
}

// Binary ensemble dump: "SPDN", u32 version, u32 count, then per path
// u64 seed, i64 path, u32 n_W, d, K, n_steps, n_jumps, then dW, dB
// column-major doubles and (t, mark) per jump. Little-endian host assumed.
namespace detail {
template <class T>
void put(std::ostream& o, T v) { o.write(reinterpret_cast<const char*>(&v), sizeof(T)); }
template <class T>
T get(std::istream& i) {
  T v{};
  i.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!i) throw std::runtime_error("noise dump truncated");
  return v;
}
}  // namespace detail

inline constexpr std::uint32_t kNoiseDumpVersion = 1;

inline void write_noise_dump(const std::string& path, const std::vector<NoiseGrid>& ens) {
  std::ofstream o(path, std::ios::binary);
  if (!o) throw std::runtime_error("cannot open " + path);
  o.write("SPDN", 4);
  detail::put<std::uint32_t>(o, kNoiseDumpVersion);
  detail::put<std::uint32_t>(o, std::uint32_t(ens.size()));
  for (const auto& ng : ens) {
    detail::put<std::uint64_t>(o, ng.seed);
    detail::put<std::int64_t>(o, ng.path_index);
    detail::put<std::uint32_t>(o, ng.n_W());
    detail::put<std::uint32_t>(o, ng.d());
    detail::put<std::uint32_t>(o, ng.K());
    detail::put<std::uint32_t>(o, ng.n_steps());
    detail::put<std::uint32_t>(o, std::uint32_t(ng.jumps.size()));
    o.write(reinterpret_cast<const char*>(ng.dW.data()), std::streamsize(ng.dW.size() * sizeof(double)));
    o.write(reinterpret_cast<const char*>(ng.dB.data()), std::streamsize(ng.dB.size() * sizeof(double)));
    for (const auto& j : ng.jumps) {
      detail::put<double>(o, j.t);
      detail::put<std::int32_t>(o, j.mark);
    }
  }
}

inline std::vector<NoiseGrid> read_noise_dump(const std::string& path, const TimeGrid& grid) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "SPDN", 4) != 0) throw std::runtime_error("bad noise dump magic");
  if (detail::get<std::uint32_t>(in) != kNoiseDumpVersion) throw std::runtime_error("unsupported noise dump version");
  const auto n = detail::get<std::uint32_t>(in);
  std::vector<NoiseGrid> ens(n);
  for (auto& ng : ens) {
    ng.seed = detail::get<std::uint64_t>(in);
    ng.path_index = detail::get<std::int64_t>(in);
    const int nW = int(detail::get<std::uint32_t>(in));
    const int d = int(detail::get<std::uint32_t>(in));
    const int K = int(detail::get<std::uint32_t>(in));
    const int N = int(detail::get<std::uint32_t>(in));
    const int nj = int(detail::get<std::uint32_t>(in));
    if (N != grid.n_steps) throw std::runtime_error("noise dump grid mismatch");
    ng.dW.resize(nW, N);
    ng.dB.resize(d, N);
    in.read(reinterpret_cast<char*>(ng.dW.data()), std::streamsize(ng.dW.size() * sizeof(double)));
    in.read(reinterpret_cast<char*>(ng.dB.data()), std::streamsize(ng.dB.size() * sizeof(double)));
    ng.counts = MatI::Zero(K, N);
    for (int q = 0; q < nj; ++q) {
      const double t = detail::get<double>(in);
      const int m = detail::get<std::int32_t>(in);
      ng.jumps.push_back({t, m, grid.cell(t)});
    }
    rebuild_counts(ng);
  }
  return ens;
}

}  // namespace spdc
