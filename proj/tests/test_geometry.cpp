#include "doctest.h"

#include <cmath>

#include "xworld/geometry.hpp"
#include "xworld/rng.hpp"

using namespace xworld;

TEST_CASE("wrap_angle: range and periodicity") {
    Rng rng(1);
    for (int i = 0; i < 1000; ++i) {
        double a = rng.uniform(-50.0, 50.0);
        double w = wrap_angle(a);
        CHECK(w > -M_PI - 1e-12);
        CHECK(w <= M_PI + 1e-12);
        CHECK(std::sin(w) == doctest::Approx(std::sin(a)).epsilon(1e-9));
        CHECK(std::cos(w) == doctest::Approx(std::cos(a)).epsilon(1e-9));
    }
}

TEST_CASE("step_ego: straight motion oracle") {
    EgoState s;
    s.heading = 0.3;
    ActionFrame a{5.0, 0.0, 0.0, 0.0};
    EgoState n = step_ego(s, a, 0.5);
    CHECK(n.x == doctest::Approx(2.5 * std::cos(0.3)));
    CHECK(n.y == doctest::Approx(2.5 * std::sin(0.3)));
    CHECK(n.heading == doctest::Approx(0.3));
}

TEST_CASE("step_ego: constant curvature traces an exact circle") {
    // v*kappa*dt per step; after N steps heading advanced by N*v*k*dt and the
    // position stays on a circle of radius 1/k around the center.
    EgoState s;
    double v = 4.0, k = 0.2, dt = 1.0 / 12.0;
    ActionFrame a{v, k, 0.0, 0.0};
    EgoState cur = s;
    int N = 30;
    for (int i = 0; i < N; ++i) cur = step_ego(cur, a, dt);
    double h1 = s.heading + v * k * dt * N;
    double ex = s.x + (std::sin(h1) - std::sin(s.heading)) / k;
    double ey = s.y - (std::cos(h1) - std::cos(s.heading)) / k;
    CHECK(cur.heading == doctest::Approx(wrap_angle(h1)).epsilon(1e-9));
    CHECK(cur.x == doctest::Approx(ex).epsilon(1e-9));
    CHECK(cur.y == doctest::Approx(ey).epsilon(1e-9));
    // and every intermediate pose stays on the circle centered left of start
    double center_x = s.x - std::sin(s.heading) / k;
    double center_y = s.y + std::cos(s.heading) / k;
    EgoState p = s;
    for (int i = 0; i < N; ++i) {
        p = step_ego(p, a, dt);
        double r = std::hypot(p.x - center_x, p.y - center_y);
        CHECK(r == doctest::Approx(1.0 / k).epsilon(1e-9));
    }
}

TEST_CASE("step_ego: curvature limit of arc formula matches straight line") {
    EgoState s;
    s.heading = 0.7;
    ActionFrame tiny{6.0, 1e-7, 0.0, 0.0};
    ActionFrame zero{6.0, 0.0, 0.0, 0.0};
    EgoState a = step_ego(s, tiny, 0.1);
    EgoState b = step_ego(s, zero, 0.1);
    CHECK(a.x == doctest::Approx(b.x).epsilon(1e-6));
    CHECK(a.y == doctest::Approx(b.y).epsilon(1e-6));
}

TEST_CASE("step_ego: rejects bad input and clamps attitude") {
    EgoState s;
    ActionFrame a{1.0, 0.0, 0.5, -0.9};
    CHECK_THROWS_AS(step_ego(s, a, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(step_ego(s, a, -1.0), std::invalid_argument);
    ActionFrame nan_a{std::nan(""), 0.0, 0.0, 0.0};
    CHECK_THROWS_AS(step_ego(s, nan_a, 0.1), std::invalid_argument);
    EgoState n = step_ego(s, a, 0.1, 0.2);
    CHECK(n.roll == doctest::Approx(0.2));
    CHECK(n.pitch == doctest::Approx(-0.2));
}

namespace {
CameraSpec test_cam() {
    CameraSpec c;
    c.fx = 40;
    c.fy = 40;
    c.cx = 40;
    c.cy = 24;
    c.image_w = 80;
    c.image_h = 48;
    c.height = 1.4;
    return c;
}
}  // namespace

TEST_CASE("projection: point straight ahead lands on the principal point") {
    EgoState ego;
    CameraSpec cam = test_cam();
    Vec3 p{10.0, 0.0, cam.height};  // at camera height, dead ahead
    auto pr = project_to_camera(p, ego, cam);
    CHECK(!pr.behind);
    CHECK(pr.depth == doctest::Approx(10.0));
    CHECK(pr.u == doctest::Approx(cam.cx));
    CHECK(pr.v == doctest::Approx(cam.cy));
    // a point left of the axis moves left in the image (smaller u)
    auto pl = project_to_camera(Vec3{10.0, 2.0, cam.height}, ego, cam);
    CHECK(pl.u < cam.cx);
    // a point below camera height moves down in the image (larger v)
    auto pd = project_to_camera(Vec3{10.0, 0.0, 0.0}, ego, cam);
    CHECK(pd.v > cam.cy);
}

TEST_CASE("projection: behind flag for points behind the camera") {
    EgoState ego;
    CameraSpec cam = test_cam();
    auto pr = project_to_camera(Vec3{-5.0, 0.0, 1.0}, ego, cam);
    CHECK(pr.behind);
    CHECK_THROWS_AS(project_to_camera(Vec3{1, 0, 0}, ego, CameraSpec{}), std::invalid_argument);
}

TEST_CASE("projection/unprojection: ground round trip under full pose") {
    Rng rng(42);
    for (int trial = 0; trial < 200; ++trial) {
        EgoState ego;
        ego.x = rng.uniform(-20, 20);
        ego.y = rng.uniform(-20, 20);
        ego.heading = rng.uniform(-M_PI, M_PI);
        ego.roll = rng.uniform(-0.15, 0.15);
        ego.pitch = rng.uniform(-0.15, 0.15);
        CameraSpec cam = test_cam();
        cam.yaw = rng.uniform(-1.0, 1.0);
        cam.tx = rng.uniform(-0.5, 0.5);
        cam.ty = rng.uniform(-0.5, 0.5);
        // pick a ground point in front of the camera
        double ahead = rng.uniform(4.0, 40.0);
        double side = rng.uniform(-4.0, 4.0);
        double wx = ego.x + std::cos(ego.heading + cam.yaw) * ahead -
                    std::sin(ego.heading + cam.yaw) * side;
        double wy = ego.y + std::sin(ego.heading + cam.yaw) * ahead +
                    std::cos(ego.heading + cam.yaw) * side;
        auto pr = project_to_camera(Vec3{wx, wy, 0.0}, ego, cam);
        if (pr.behind) continue;
        Vec2 back;
        bool ok = unproject_ground(ego, cam, pr.u, pr.v, back);
        REQUIRE(ok);
        CHECK(back.x == doctest::Approx(wx).epsilon(1e-6));
        CHECK(back.y == doctest::Approx(wy).epsilon(1e-6));
    }
}

TEST_CASE("unproject_ground: horizon pixels do not hit the ground") {
    EgoState ego;
    CameraSpec cam = test_cam();
    Vec2 g;
    // pixel well above the principal point looks upward
    CHECK(!unproject_ground(ego, cam, cam.cx, 2.0, g));
    // pixel below the principal point hits the ground ahead
    CHECK(unproject_ground(ego, cam, cam.cx, cam.cy + 10.0, g));
    CHECK(g.x > 0);
}

TEST_CASE("camera rig: mount yaw rotates the viewing direction") {
    EgoState ego;
    CameraSpec cam = test_cam();
    cam.yaw = M_PI / 2;  // looks left
    auto pr = project_to_camera(Vec3{0.0, 10.0, cam.height}, ego, cam);
    CHECK(!pr.behind);
    CHECK(pr.u == doctest::Approx(cam.cx));
    auto ahead = project_to_camera(Vec3{10.0, 0.0, cam.height}, ego, cam);
    CHECK((ahead.behind || std::abs(ahead.u - cam.cx) > 20.0));
}
