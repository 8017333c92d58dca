#pragma once

#include <cmath>

namespace gridwatch::geo {

// Affine bridge between WGS-84 report locations and the planar map units bus
// coordinates are expressed in: a local equirectangular projection anchored
// at `origin`, scaled by meters_per_unit. Good to well under a meter at the
// ~10 km extents grids here use.
struct GeoReference {
  double origin_lat = 40.2206;   // degrees
  double origin_lon = -74.7597;  // degrees
  double meters_per_unit = 1000.0;
};

inline constexpr double kEarthRadiusMeters = 6371000.0;

struct MapPoint {
  double x = 0.0;
  double y = 0.0;
};

inline MapPoint to_map_units(const GeoReference& g, double lat, double lon) {
  const double deg = M_PI / 180.0;
  const double east = (lon - g.origin_lon) * deg * kEarthRadiusMeters * std::cos(g.origin_lat * deg);
  const double north = (lat - g.origin_lat) * deg * kEarthRadiusMeters;
  return {east / g.meters_per_unit, north / g.meters_per_unit};
}

struct LatLon {
  double lat = 0.0;
  double lon = 0.0;
};

inline LatLon from_map_units(const GeoReference& g, double x, double y) {
  const double deg = M_PI / 180.0;
  const double east = x * g.meters_per_unit;
  const double north = y * g.meters_per_unit;
  return {g.origin_lat + north / (kEarthRadiusMeters * deg),
          g.origin_lon + east / (kEarthRadiusMeters * std::cos(g.origin_lat * deg) * deg)};
}

// Distance from p to the segment [a, b], in map units.
inline double point_segment_distance(MapPoint p, MapPoint a, MapPoint b) {
  const double dx = b.x - a.x;
  const double dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = 0.0;
  if (len2 > 0.0) t = std::clamp(((p.x - a.x) * dx + (p.y - a.y) * dy) / len2, 0.0, 1.0);
  const double cx = a.x + t * dx;
  const double cy = a.y + t * dy;
  return std::hypot(p.x - cx, p.y - cy);
}

}  // namespace gridwatch::geo
