#ifndef CPCR_METRICS_HPP
#define CPCR_METRICS_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpcr/common.hpp"

// Volume-level segmentation metrics: overlap (dice, jaccard) and surface
// distances (95th-percentile Hausdorff, average surface distance). Surface
// distances run on an exact separable Euclidean distance transform; a
// brute-force all-pairs route exists for cross-checking and stays available
// at runtime behind DistanceRoute::brute_force.

namespace cpcr {

struct BinaryMask3D {
  std::array<int, 3> dims{0, 0, 0};        // (z, y, x)
  std::array<double, 3> spacing{1, 1, 1};  // physical step per axis
  std::vector<std::uint8_t> voxels;        // z-major, x fastest

  BinaryMask3D() = default;
  BinaryMask3D(std::array<int, 3> d, std::array<double, 3> s = {1, 1, 1})
      : dims(d), spacing(s),
        voxels(static_cast<size_t>(d[0]) * d[1] * d[2], 0) {
    for (int a = 0; a < 3; ++a) {
      if (dims[a] <= 0) throw ShapeError("BinaryMask3D: empty dimension");
      if (spacing[a] <= 0.0)
        throw ArgumentError("BinaryMask3D: spacing must be positive");
    }
  }

  std::int64_t index(int z, int y, int x) const {
    return (static_cast<std::int64_t>(z) * dims[1] + y) * dims[2] + x;
  }
  bool at(int z, int y, int x) const { return voxels[index(z, y, x)] != 0; }
  void set(int z, int y, int x, bool v) { voxels[index(z, y, x)] = v ? 1 : 0; }
  std::int64_t count() const {
    std::int64_t c = 0;
    for (auto v : voxels) c += v != 0;
    return c;
  }
  bool same_grid(const BinaryMask3D& o) const {
    return dims == o.dims && spacing == o.spacing;
  }
};

enum class DistanceRoute { transform, brute_force };

inline void require_same_grid(const BinaryMask3D& a, const BinaryMask3D& b,
                              const char* op) {
  if (!a.same_grid(b))
    throw ShapeError(std::string(op) + ": masks on different grids");
}

inline double dice_coefficient(const BinaryMask3D& pred,
                               const BinaryMask3D& gt) {
  require_same_grid(pred, gt, "dice_coefficient");
  std::int64_t inter = 0, p = 0, g = 0;
  for (size_t i = 0; i < pred.voxels.size(); ++i) {
    const bool pv = pred.voxels[i] != 0, gv = gt.voxels[i] != 0;
    inter += pv && gv;
    p += pv;
    g += gv;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(p + g);
}

inline double jaccard(const BinaryMask3D& pred, const BinaryMask3D& gt) {
  require_same_grid(pred, gt, "jaccard");
  std::int64_t inter = 0, uni = 0;
  for (size_t i = 0; i < pred.voxels.size(); ++i) {
    const bool pv = pred.voxels[i] != 0, gv = gt.voxels[i] != 0;
    inter += pv && gv;
    uni += pv || gv;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

// Foreground voxels with a background neighbor along any non-degenerate
// axis (6-connectivity; degenerate axes of extent 1 contribute no
// neighbors, so single-slice masks reduce to 4-connectivity). Outside the
// array counts as background.
inline std::vector<std::array<int, 3>> extract_surface(
    const BinaryMask3D& m) {
  std::vector<std::array<int, 3>> out;
  for (int z = 0; z < m.dims[0]; ++z)
    for (int y = 0; y < m.dims[1]; ++y)
      for (int x = 0; x < m.dims[2]; ++x) {
        if (!m.at(z, y, x)) continue;
        bool boundary = false;
        if (m.dims[0] > 1)
          boundary = boundary || z == 0 || !m.at(z - 1, y, x) ||
                     z == m.dims[0] - 1 || !m.at(z + 1, y, x);
        if (!boundary && m.dims[1] > 1)
          boundary = y == 0 || !m.at(z, y - 1, x) || y == m.dims[1] - 1 ||
                     !m.at(z, y + 1, x);
        if (!boundary && m.dims[2] > 1)
          boundary = x == 0 || !m.at(z, y, x - 1) || x == m.dims[2] - 1 ||
                     !m.at(z, y, x + 1);
        if (boundary) out.push_back({z, y, x});
      }
  return out;
}

namespace detail {

inline constexpr double kEdtInf = 1e30;

// Lower envelope of parabolas on samples at physical positions i*step
// (Felzenszwalb & Huttenlocher), applied along one axis.
inline void edt_axis(std::vector<double>& f, double step,
                     std::vector<double>& d, std::vector<int>& v,
                     std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  int k = 0;
  v[0] = 0;
  z[0] = -kEdtInf;
  z[1] = kEdtInf;
  auto pos = [step](int i) { return step * i; };
  for (int q = 1; q < n; ++q) {
    double s = 0.0;
    while (true) {
      const int p = v[static_cast<size_t>(k)];
      s = ((f[static_cast<size_t>(q)] + pos(q) * pos(q)) -
           (f[static_cast<size_t>(p)] + pos(p) * pos(p))) /
          (2.0 * pos(q) - 2.0 * pos(p));
      if (s > z[static_cast<size_t>(k)]) break;
      --k;
    }
    ++k;
    v[static_cast<size_t>(k)] = q;
    z[static_cast<size_t>(k)] = s;
    z[static_cast<size_t>(k + 1)] = kEdtInf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[static_cast<size_t>(k + 1)] < pos(q)) ++k;
    const int p = v[static_cast<size_t>(k)];
    d[static_cast<size_t>(q)] =
        (pos(q) - pos(p)) * (pos(q) - pos(p)) + f[static_cast<size_t>(p)];
  }
  for (int q = 0; q < n; ++q) f[static_cast<size_t>(q)] = d[static_cast<size_t>(q)];
}

// Exact squared physical distance to the nearest seed voxel.
inline std::vector<double> edt_squared(
    const BinaryMask3D& grid_like, const std::vector<std::array<int, 3>>& seeds) {
  const auto& dm = grid_like.dims;
  std::vector<double> g(static_cast<size_t>(dm[0]) * dm[1] * dm[2], kEdtInf);
  for (const auto& s : seeds)
    g[static_cast<size_t>(grid_like.index(s[0], s[1], s[2]))] = 0.0;
  const int maxdim = std::max({dm[0], dm[1], dm[2]});
  std::vector<double> f(static_cast<size_t>(maxdim));
  std::vector<double> d(static_cast<size_t>(maxdim));
  std::vector<int> v(static_cast<size_t>(maxdim));
  std::vector<double> z(static_cast<size_t>(maxdim) + 1);
  // x axis
  for (int zz = 0; zz < dm[0]; ++zz)
    for (int y = 0; y < dm[1]; ++y) {
      const std::int64_t base = grid_like.index(zz, y, 0);
      f.assign(g.begin() + base, g.begin() + base + dm[2]);
      f.resize(static_cast<size_t>(dm[2]));
      edt_axis(f, grid_like.spacing[2], d, v, z);
      std::copy(f.begin(), f.begin() + dm[2], g.begin() + base);
    }
  // y axis
  for (int zz = 0; zz < dm[0]; ++zz)
    for (int x = 0; x < dm[2]; ++x) {
      f.resize(static_cast<size_t>(dm[1]));
      for (int y = 0; y < dm[1]; ++y)
        f[static_cast<size_t>(y)] = g[static_cast<size_t>(grid_like.index(zz, y, x))];
      edt_axis(f, grid_like.spacing[1], d, v, z);
      for (int y = 0; y < dm[1]; ++y)
        g[static_cast<size_t>(grid_like.index(zz, y, x))] = f[static_cast<size_t>(y)];
    }
  // z axis
  for (int y = 0; y < dm[1]; ++y)
    for (int x = 0; x < dm[2]; ++x) {
      f.resize(static_cast<size_t>(dm[0]));
      for (int zz = 0; zz < dm[0]; ++zz)
        f[static_cast<size_t>(zz)] = g[static_cast<size_t>(grid_like.index(zz, y, x))];
      edt_axis(f, grid_like.spacing[0], d, v, z);
      for (int zz = 0; zz < dm[0]; ++zz)
        g[static_cast<size_t>(grid_like.index(zz, y, x))] = f[static_cast<size_t>(zz)];
    }
  return g;
}

}  // namespace detail

// Distances from each surface voxel of `a` to the nearest surface voxel of
// `b`, in physical units.
inline std::vector<double> directed_surface_distances(
    const BinaryMask3D& a, const BinaryMask3D& b,
    DistanceRoute route = DistanceRoute::transform) {
  require_same_grid(a, b, "directed_surface_distances");
  const auto sa = extract_surface(a);
  const auto sb = extract_surface(b);
  if (sa.empty() || sb.empty())
    throw DataError("directed_surface_distances: empty surface");
  std::vector<double> out;
  out.reserve(sa.size());
  if (route == DistanceRoute::brute_force) {
    for (const auto& p : sa) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : sb) {
        const double dz = (p[0] - q[0]) * a.spacing[0];
        const double dy = (p[1] - q[1]) * a.spacing[1];
        const double dx = (p[2] - q[2]) * a.spacing[2];
        best = std::min(best, dz * dz + dy * dy + dx * dx);
      }
      out.push_back(std::sqrt(best));
    }
    return out;
  }
  const std::vector<double> g = detail::edt_squared(b, sb);
  for (const auto& p : sa)
    out.push_back(std::sqrt(g[static_cast<size_t>(b.index(p[0], p[1], p[2]))]));
  return out;
}

// q-th percentile (0..100) by linear interpolation on the sorted values.
inline double percentile(std::vector<double> vals, double q) {
  if (vals.empty()) throw ArgumentError("percentile: empty input");
  std::sort(vals.begin(), vals.end());
  const double rank = (q / 100.0) * (static_cast<double>(vals.size()) - 1.0);
  const auto lo = static_cast<size_t>(rank);
  if (lo + 1 >= vals.size()) return vals.back();
  const double frac = rank - static_cast<double>(lo);
  return vals[lo] + frac * (vals[lo + 1] - vals[lo]);
}

inline double hd95(const BinaryMask3D& pred, const BinaryMask3D& gt,
                   DistanceRoute route = DistanceRoute::transform) {
  const auto fwd = directed_surface_distances(pred, gt, route);
  const auto bwd = directed_surface_distances(gt, pred, route);
  return std::max(percentile(fwd, 95.0), percentile(bwd, 95.0));
}

inline double asd(const BinaryMask3D& pred, const BinaryMask3D& gt,
                  DistanceRoute route = DistanceRoute::transform) {
  const auto fwd = directed_surface_distances(pred, gt, route);
  const auto bwd = directed_surface_distances(gt, pred, route);
  double sum = 0.0;
  for (double d : fwd) sum += d;
  for (double d : bwd) sum += d;
  return sum / static_cast<double>(fwd.size() + bwd.size());
}

// A labeled volume restacked to its original 3D size.
struct LabelVolume {
  std::string name;
  std::array<int, 3> dims{0, 0, 0};        // (z, y, x)
  std::array<double, 3> spacing{1, 1, 1};
  std::vector<std::int32_t> labels;        // z-major, x fastest

  BinaryMask3D binarize(std::int32_t cls) const {
    BinaryMask3D m(dims, spacing);
    for (size_t i = 0; i < labels.size(); ++i)
      m.voxels[i] = labels[i] == cls ? 1 : 0;
    return m;
  }
};

struct MetricValues {
  double dsc = std::numeric_limits<double>::quiet_NaN();
  double iou = std::numeric_limits<double>::quiet_NaN();
  double hd95 = std::numeric_limits<double>::quiet_NaN();
  double asd = std::numeric_limits<double>::quiet_NaN();
};

struct SkipRecord {
  std::string volume;
  int cls = 0;
  std::string reason;
};

struct MetricsReport {
  std::map<int, MetricValues> per_class;
  MetricValues mean;
  int num_volumes = 0;
  std::vector<SkipRecord> skipped;
};

// Per foreground class: binarize, compute all four metrics per volume,
// average over volumes, then average the per-class values (background
// excluded). A class absent from both pred and gt in a volume is skipped
// and listed; one-sided absences score dsc = iou = 0 with the surface
// metrics skipped.
inline MetricsReport evaluate_volumes(
    const std::vector<LabelVolume>& preds,
    const std::vector<LabelVolume>& gts, int num_classes,
    DistanceRoute route = DistanceRoute::transform) {
  if (preds.size() != gts.size())
    throw ArgumentError("evaluate_volumes: list sizes differ");
  if (num_classes < 2)
    throw ArgumentError("evaluate_volumes: need at least 2 classes");
  MetricsReport report;
  report.num_volumes = static_cast<int>(gts.size());
  struct Acc {
    double sum = 0.0;
    int n = 0;
    void add(double v) {
      sum += v;
      ++n;
    }
    double mean() const {
      return n ? sum / n : std::numeric_limits<double>::quiet_NaN();
    }
  };
  std::map<int, std::array<Acc, 4>> acc;  // dsc, iou, hd95, asd
  for (size_t v = 0; v < gts.size(); ++v) {
    const LabelVolume& p = preds[v];
    const LabelVolume& g = gts[v];
    const std::string vname =
        g.name.empty() ? "volume " + std::to_string(v) : g.name;
    if (p.dims != g.dims)
      throw DataError("evaluate_volumes: prediction shape differs from "
                      "ground truth for " + vname);
    for (int c = 1; c < num_classes; ++c) {
      BinaryMask3D pm = p.binarize(c);
      BinaryMask3D gm = g.binarize(c);
      const bool pe = pm.count() == 0, ge = gm.count() == 0;
      if (pe && ge) {
        report.skipped.push_back({vname, c, "class absent from both"});
        continue;
      }
      acc[c][0].add(dice_coefficient(pm, gm));
      acc[c][1].add(jaccard(pm, gm));
      if (pe || ge) {
        report.skipped.push_back(
            {vname, c,
             pe ? "class absent from prediction; surface metrics skipped"
                : "class absent from ground truth; surface metrics skipped"});
        continue;
      }
      acc[c][2].add(hd95(pm, gm, route));
      acc[c][3].add(asd(pm, gm, route));
    }
  }
  Acc mdsc, miou, mhd, masd_;
  for (int c = 1; c < num_classes; ++c) {
    std::array<Acc, 4>& a = acc[c];
    MetricValues mv;
    mv.dsc = a[0].mean();
    mv.iou = a[1].mean();
    mv.hd95 = a[2].mean();
    mv.asd = a[3].mean();
    report.per_class[c] = mv;
    if (a[0].n) mdsc.add(mv.dsc);
    if (a[1].n) miou.add(mv.iou);
    if (a[2].n) mhd.add(mv.hd95);
    if (a[3].n) masd_.add(mv.asd);
  }
  report.mean.dsc = mdsc.mean();
  report.mean.iou = miou.mean();
  report.mean.hd95 = mhd.mean();
  report.mean.asd = masd_.mean();
  return report;
}

inline nlohmann::json metric_values_json(const MetricValues& v) {
  auto field = [](double x) {
    return std::isnan(x) ? nlohmann::json() : nlohmann::json(x);
  };
  return {{"dsc", field(v.dsc)},
          {"iou", field(v.iou)},
          {"hd95", field(v.hd95)},
          {"asd", field(v.asd)}};
}

inline nlohmann::json report_to_json(const MetricsReport& r) {
  nlohmann::json per;
  for (const auto& [c, v] : r.per_class)
    per[std::to_string(c)] = metric_values_json(v);
  nlohmann::json skipped = nlohmann::json::array();
  for (const auto& s : r.skipped)
    skipped.push_back(
        {{"volume", s.volume}, {"class", s.cls}, {"reason", s.reason}});
  return {{"per_class", per},
          {"mean", metric_values_json(r.mean)},
          {"num_volumes", r.num_volumes},
          {"skipped", skipped}};
}

// One row per (class, metric); "mean" rows cover the class average.
inline std::string report_to_csv(const MetricsReport& r) {
  std::string out = "class,metric,value\n";
  auto row = [&out](const std::string& cls, const char* metric, double v) {
    out += cls;
    out += ',';
    out += metric;
    out += ',';
    out += std::isnan(v) ? "" : std::to_string(v);
    out += '\n';
  };
  for (const auto& [c, v] : r.per_class) {
    const std::string cls = std::to_string(c);
    row(cls, "dsc", v.dsc);
    row(cls, "iou", v.iou);
    row(cls, "hd95", v.hd95);
    row(cls, "asd", v.asd);
  }
  row("mean", "dsc", r.mean.dsc);
  row("mean", "iou", r.mean.iou);
  row("mean", "hd95", r.mean.hd95);
  row("mean", "asd", r.mean.asd);
  return out;
}

}  // namespace cpcr

#endif  // CPCR_METRICS_HPP
