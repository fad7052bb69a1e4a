#include "biomoe/landmark_blend.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "biomoe/numerics.hpp"

namespace biomoe {

const std::array<const char*, 8> kRequiredRegions = {
    "left_eye",     "right_eye",     "left_eyebrow", "right_eyebrow",
    "nose_tip",     "mouth",         "left_pupil",   "right_pupil"};

namespace {

Vec3 sub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
double dot3(const Vec3& a, const Vec3& b) {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}
double norm3(const Vec3& a) { return std::sqrt(dot3(a, a)); }
Vec3 cross3(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2],
          a[0] * b[1] - a[1] * b[0]};
}
Vec3 scaled(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }

const std::array<const char*, 6> kEyeGroup = {"left_eye",      "right_eye",
                                              "left_eyebrow",  "right_eyebrow",
                                              "left_pupil",    "right_pupil"};
const std::array<const char*, 3> kLeftGroup = {"left_eye", "left_eyebrow", "left_pupil"};
const std::array<const char*, 3> kRightGroup = {"right_eye", "right_eyebrow",
                                                "right_pupil"};

template <std::size_t N>
void translate_regions(LandmarkSet& lm, const std::array<const char*, N>& regions,
                       const Vec3& t) {
  for (Landmark& p : lm.points) {
    for (const char* r : regions) {
      if (p.region == r) {
        p.u += t[0];
        p.v += t[1];
        p.z += t[2];
        break;
      }
    }
  }
}

void translate_region(LandmarkSet& lm, const char* region, const Vec3& t) {
  translate_regions(lm, std::array<const char*, 1>{region}, t);
}

Vec3 eye_midpoint(const LandmarkSet& lm) {
  const Vec3 l = lm.centroid("left_eye");
  const Vec3 r = lm.centroid("right_eye");
  return {(l[0] + r[0]) / 2.0, (l[1] + r[1]) / 2.0, (l[2] + r[2]) / 2.0};
}

// Dominant direction of a small point cloud (rows of a centered matrix).
Vec3 principal_direction(const std::vector<Vec3>& pts, double* leading_sigma) {
  Vec3 c = {0.0, 0.0, 0.0};
  for (const Vec3& p : pts) {
    c[0] += p[0];
    c[1] += p[1];
    c[2] += p[2];
  }
  const double inv = 1.0 / static_cast<double>(pts.size());
  c = scaled(c, inv);
  Matrix m(pts.size(), 3);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    m.at(i, 0) = pts[i][0] - c[0];
    m.at(i, 1) = pts[i][1] - c[1];
    m.at(i, 2) = pts[i][2] - c[2];
  }
  const SvdResult dec = svd(m);
  if (leading_sigma) *leading_sigma = dec.s[0];
  return {dec.vt.at(0, 0), dec.vt.at(0, 1), dec.vt.at(0, 2)};
}

// Unit normal of the least-squares plane through all points.
Vec3 face_plane_normal(const LandmarkSet& lm) {
  Vec3 c = {0.0, 0.0, 0.0};
  for (const Landmark& p : lm.points) {
    c[0] += p.u;
    c[1] += p.v;
    c[2] += p.z;
  }
  c = scaled(c, 1.0 / static_cast<double>(lm.points.size()));
  Matrix m(lm.points.size(), 3);
  for (std::size_t i = 0; i < lm.points.size(); ++i) {
    m.at(i, 0) = lm.points[i].u - c[0];
    m.at(i, 1) = lm.points[i].v - c[1];
    m.at(i, 2) = lm.points[i].z - c[2];
  }
  const SvdResult dec = svd(m);
  if (dec.s.size() < 3 || dec.s[1] < 1e-12)
    throw DegenerateGeometryError("face plane undefined: points nearly collinear");
  return {dec.vt.at(2, 0), dec.vt.at(2, 1), dec.vt.at(2, 2)};
}

double max_abs_coord(const LandmarkSet& lm) {
  double m = 0.0;
  for (const Landmark& p : lm.points)
    m = std::max({m, std::abs(p.u), std::abs(p.v), std::abs(p.z)});
  return m;
}

struct BlendTargets {
  double nose_mouth = 0.0;
  double nose_eye = 0.0;
  double inter_pupil = 0.0;
};

BlendTargets measure(const LandmarkSet& lm) {
  const FacialAxis axis = fit_vertical_axis(lm);
  const Vec3 nose = lm.centroid("nose_tip");
  BlendTargets t;
  t.nose_mouth = std::abs(dot3(sub(lm.centroid("mouth"), nose), axis.direction));
  t.nose_eye = std::abs(dot3(sub(eye_midpoint(lm), nose), axis.direction));
  t.inter_pupil = norm3(sub(lm.centroid("right_pupil"), lm.centroid("left_pupil")));
  return t;
}

}  // namespace

void LandmarkSet::validate() const {
  if (points.empty()) throw InvalidInputError("landmark set is empty");
  for (const Landmark& p : points) {
    if (!std::isfinite(p.u) || !std::isfinite(p.v) || !std::isfinite(p.z))
      throw InvalidInputError("landmark set has non-finite coordinates");
  }
  for (const char* region : kRequiredRegions) {
    if (!has_region(region))
      throw InvalidInputError(std::string("landmark set missing region: ") + region);
  }
}

bool LandmarkSet::has_region(const std::string& region) const {
  for (const Landmark& p : points)
    if (p.region == region) return true;
  return false;
}

Vec3 LandmarkSet::centroid(const std::string& region) const {
  Vec3 c = {0.0, 0.0, 0.0};
  std::size_t n = 0;
  for (const Landmark& p : points) {
    if (p.region == region) {
      c[0] += p.u;
      c[1] += p.v;
      c[2] += p.z;
      ++n;
    }
  }
  if (n == 0) throw InvalidInputError("centroid of empty region: " + region);
  return scaled(c, 1.0 / static_cast<double>(n));
}

FacialAxis fit_vertical_axis(const LandmarkSet& lm) {
  lm.validate();
  const Vec3 e = eye_midpoint(lm);
  const Vec3 n = lm.centroid("nose_tip");
  const Vec3 m = lm.centroid("mouth");

  double sigma = 0.0;
  Vec3 dir = principal_direction({e, n, m}, &sigma);
  if (sigma < 1e-12)
    throw DegenerateGeometryError("axis anchors coincide");

  const Vec3 toward_mouth = sub(m, e);
  const double orient = dot3(dir, toward_mouth);
  if (std::abs(orient) < 1e-15)
    throw DegenerateGeometryError("axis orientation undefined");
  if (orient < 0.0) dir = scaled(dir, -1.0);

  FacialAxis axis;
  axis.direction = dir;
  axis.origin = {(e[0] + n[0] + m[0]) / 3.0, (e[1] + n[1] + m[1]) / 3.0,
                 (e[2] + n[2] + m[2]) / 3.0};
  return axis;
}

LandmarkSet blend_landmarks(const LandmarkSet& a, const LandmarkSet& b) {
  a.validate();
  b.validate();
  const BlendTargets target = measure(b);

  LandmarkSet out = a;
  const double tol = 1e-13 * std::max(1.0, max_abs_coord(a));

  // The axis is refit after each round of translations, so the enforced
  // distances converge to a fixed point of the measurement itself; that is
  // what makes a second blend against the same target a no-op.
  for (int iter = 0; iter < 200; ++iter) {
    const FacialAxis axis = fit_vertical_axis(out);
    const Vec3 h = axis.direction;

    const Vec3 normal = face_plane_normal(out);
    Vec3 w = cross3(normal, h);
    const double wn = norm3(w);
    if (wn < 1e-12)
      throw DegenerateGeometryError("horizontal direction undefined");
    w = scaled(w, 1.0 / wn);
    const Vec3 pupil_span =
        sub(out.centroid("right_pupil"), out.centroid("left_pupil"));
    const double side = dot3(w, pupil_span);
    if (std::abs(side) < 1e-15)
      throw DegenerateGeometryError("pupils horizontally coincident");
    if (side < 0.0) w = scaled(w, -1.0);

    const Vec3 nose = out.centroid("nose_tip");
    const double cur_nm = dot3(sub(out.centroid("mouth"), nose), h);
    const double t_mouth = (cur_nm < 0.0 ? -target.nose_mouth : target.nose_mouth) - cur_nm;

    const double cur_ne = dot3(sub(eye_midpoint(out), nose), h);
    const double t_eye = (cur_ne < 0.0 ? -target.nose_eye : target.nose_eye) - cur_ne;

    const Vec3 span = sub(out.centroid("right_pupil"), out.centroid("left_pupil"));
    const double vh = dot3(span, w);
    const double vperp_sq = std::max(0.0, dot3(span, span) - vh * vh);
    const double disc = target.inter_pupil * target.inter_pupil - vperp_sq;
    if (disc < -1e-12 * std::max(1.0, target.inter_pupil * target.inter_pupil))
      throw DegenerateGeometryError("inter-pupil distance unreachable");
    const double vh_new = (vh < 0.0 ? -1.0 : 1.0) * std::sqrt(std::max(0.0, disc));
    const double t_pupil = (vh_new - vh) / 2.0;

    if (std::abs(t_mouth) < tol && std::abs(t_eye) < tol && std::abs(t_pupil) < tol)
      return out;

    translate_region(out, "mouth", scaled(h, t_mouth));
    translate_regions(out, kEyeGroup, scaled(h, t_eye));
    translate_regions(out, kRightGroup, scaled(w, t_pupil));
    translate_regions(out, kLeftGroup, scaled(w, -t_pupil));
  }
  throw DegenerateGeometryError("blend did not converge");
}

LandmarkSet project_2d(const LandmarkSet& lm) {
  LandmarkSet out = lm;
  for (Landmark& p : out.points) p.z = 0.0;
  return out;
}

LandmarkSet read_landmark_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open landmark file: " + path);
  LandmarkSet lm;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    Landmark p;
    if (!(ss >> p.region)) continue;  // blank line
    if (!(ss >> p.u >> p.v >> p.z))
      throw ConfigError(path + ":" + std::to_string(line_no) +
                        ": expected `region u v z`");
    std::string extra;
    if (ss >> extra)
      throw ConfigError(path + ":" + std::to_string(line_no) + ": trailing fields");
    lm.points.push_back(std::move(p));
  }
  return lm;
}

void write_landmark_file(const std::string& path, const LandmarkSet& lm) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write landmark file: " + path);
  char buf[128];
  for (const Landmark& p : lm.points) {
    std::snprintf(buf, sizeof(buf), " %.17g %.17g %.17g", p.u, p.v, p.z);
    out << p.region << buf << "\n";
  }
}

}  // namespace biomoe
