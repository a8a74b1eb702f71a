#pragma once

#include <cmath>
#include <stdexcept>

namespace xworld {

struct Vec2 {
    double x = 0, y = 0;
};
struct Vec3 {
    double x = 0, y = 0, z = 0;
};

inline double wrap_angle(double a) {
    // wrap to (-pi, pi]
    const double two_pi = 6.283185307179586476925286766559;
    a = std::fmod(a, two_pi);
    if (a <= -3.14159265358979323846) a += two_pi;
    if (a > 3.14159265358979323846) a -= two_pi;
    return a;
}

// World frame: x/y ground plane, z up. Ego frame: x forward, y left, z up.
struct EgoState {
    double x = 0;
    double y = 0;
    double heading = 0;  // radians, wrapped to (-pi, pi]
    double roll = 0;
    double pitch = 0;
};

struct ActionFrame {
    double velocity = 0;   // m/s, >= 0
    double curvature = 0;  // 1/m
    double roll = 0;
    double pitch = 0;
};

// Pinhole camera rigidly mounted on the ego body.
struct CameraSpec {
    double fx = 0, fy = 0, cx = 0, cy = 0;  // pixels
    double yaw = 0;                         // mount yaw offset, radians
    double tx = 0, ty = 0;                  // mount translation in ego frame, meters
    double height = 1.4;                    // mount height above ground, meters
    int image_h = 0, image_w = 0;

    bool valid() const {
        return fx > 0 && fy > 0 && image_h > 0 && image_w > 0 && cx > 0 && cx < image_w &&
               cy > 0 && cy < image_h;
    }
};

struct PixelProjection {
    double u = 0, v = 0;
    double depth = 0;
    bool behind = true;
};

// Unicycle kinematics with exact arc integration; roll/pitch come straight
// from the action channels (clamped to the terrain limit).
inline EgoState step_ego(const EgoState& state, const ActionFrame& action, double dt,
                         double attitude_limit = 0.2) {
    if (!(dt > 0)) throw std::invalid_argument("step_ego: dt must be > 0");
    if (!std::isfinite(state.x) || !std::isfinite(state.y) || !std::isfinite(state.heading) ||
        !std::isfinite(action.velocity) || !std::isfinite(action.curvature) ||
        !std::isfinite(action.roll) || !std::isfinite(action.pitch))
        throw std::invalid_argument("step_ego: non-finite input");

    EgoState out = state;
    double v = action.velocity, k = action.curvature;
    if (std::abs(k) > 1e-9) {
        double h0 = state.heading;
        double h1 = h0 + v * k * dt;
        out.x = state.x + (std::sin(h1) - std::sin(h0)) / k;
        out.y = state.y - (std::cos(h1) - std::cos(h0)) / k;
        out.heading = wrap_angle(h1);
    } else {
        out.x = state.x + v * dt * std::cos(state.heading);
        out.y = state.y + v * dt * std::sin(state.heading);
        out.heading = wrap_angle(state.heading + v * k * dt);
    }
    out.roll = std::clamp(action.roll, -attitude_limit, attitude_limit);
    out.pitch = std::clamp(action.pitch, -attitude_limit, attitude_limit);
    return out;
}

namespace detail {

// Body->world rotation: yaw about z, then pitch about body-y, roll about
// body-x. Returned as row-major 3x3.
inline void body_rotation(const EgoState& ego, double R[9]) {
    double cy = std::cos(ego.heading), sy = std::sin(ego.heading);
    double cp = std::cos(ego.pitch), sp = std::sin(ego.pitch);
    double cr = std::cos(ego.roll), sr = std::sin(ego.roll);
    // R = Rz(yaw) * Ry(pitch) * Rx(roll)
    R[0] = cy * cp;
    R[1] = cy * sp * sr - sy * cr;
    R[2] = cy * sp * cr + sy * sr;
    R[3] = sy * cp;
    R[4] = sy * sp * sr + cy * cr;
    R[5] = sy * sp * cr - cy * sr;
    R[6] = -sp;
    R[7] = cp * sr;
    R[8] = cp * cr;
}

}  // namespace detail

// World point -> camera frame (CV convention: x right, y down, z forward).
inline Vec3 world_to_camera(const Vec3& p, const EgoState& ego, const CameraSpec& cam) {
    double R[9];
    detail::body_rotation(ego, R);
    double dx = p.x - ego.x, dy = p.y - ego.y, dz = p.z;  // ego origin sits on the ground
    // body coords: R^T * d
    double bx = R[0] * dx + R[3] * dy + R[6] * dz;
    double by = R[1] * dx + R[4] * dy + R[7] * dz;
    double bz = R[2] * dx + R[5] * dy + R[8] * dz;
    bx -= cam.tx;
    by -= cam.ty;
    bz -= cam.height;
    double cyaw = std::cos(cam.yaw), syaw = std::sin(cam.yaw);
    double mx = cyaw * bx + syaw * by;
    double my = -syaw * bx + cyaw * by;
    // body (fwd,left,up) -> camera (right,down,forward)
    return Vec3{-my, -bz, mx};
}

inline PixelProjection project_to_camera(const Vec3& p, const EgoState& ego,
                                         const CameraSpec& cam) {
    if (!cam.valid()) throw std::invalid_argument("project_to_camera: invalid camera");
    Vec3 c = world_to_camera(p, ego, cam);
    PixelProjection out;
    out.depth = c.z;
    if (c.z <= 1e-6) {
        out.behind = true;
        return out;
    }
    out.behind = false;
    out.u = cam.cx + cam.fx * c.x / c.z;
    out.v = cam.cy + cam.fy * c.y / c.z;
    return out;
}

// Camera-frame ray for pixel (u, v), expressed in world coordinates, plus the
// camera center in world coordinates.
inline void pixel_ray(const EgoState& ego, const CameraSpec& cam, double u, double v,
                      Vec3& origin, Vec3& dir) {
    double R[9];
    detail::body_rotation(ego, R);
    double cyaw = std::cos(cam.yaw), syaw = std::sin(cam.yaw);
    // direction in camera frame
    double dx = (u - cam.cx) / cam.fx, dy = (v - cam.cy) / cam.fy, dz = 1.0;
    // camera -> body: body_fwd = cam z, body_left = -cam x, body_up = -cam y
    double bx = dz, by = -dx, bz = -dy;
    // undo mount yaw
    double mx = cyaw * bx - syaw * by;
    double my = syaw * bx + cyaw * by;
    double mz = bz;
    // body -> world
    dir.x = R[0] * mx + R[1] * my + R[2] * mz;
    dir.y = R[3] * mx + R[4] * my + R[5] * mz;
    dir.z = R[6] * mx + R[7] * my + R[8] * mz;
    // camera center: body point (tx, ty, height)
    double ox = cam.tx, oy = cam.ty, oz = cam.height;
    origin.x = ego.x + R[0] * ox + R[1] * oy + R[2] * oz;
    origin.y = ego.y + R[3] * ox + R[4] * oy + R[5] * oz;
    origin.z = R[6] * ox + R[7] * oy + R[8] * oz;
}

// Intersect the pixel ray with the ground plane z = 0. Returns false when the
// ray points at or above the horizon.
inline bool unproject_ground(const EgoState& ego, const CameraSpec& cam, double u, double v,
                             Vec2& ground) {
    Vec3 o, d;
    pixel_ray(ego, cam, u, v, o, d);
    if (d.z >= -1e-9) return false;
    double t = -o.z / d.z;
    if (t <= 0) return false;
    ground.x = o.x + t * d.x;
    ground.y = o.y + t * d.y;
    return true;
}

}  // namespace xworld
