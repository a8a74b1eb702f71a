#pragma once

#include <array>
#include <string>
#include <vector>

#include "xworld/geometry.hpp"
#include "xworld/rng.hpp"
#include "xworld/tensor.hpp"

namespace xworld {

enum class AgentCategory : int { Car = 0, Pedestrian = 1, Cyclist = 2 };
enum class StaticCategory : int { LaneMarking = 0, SolidBoundary = 1 };
enum class Weather : int { Sunny = 0, Rainy = 1, Foggy = 2 };
enum class TimeOfDay : int { Day = 0, Dusk = 1, Night = 2 };
enum class Locale : int { Urban = 0, Rural = 1, Highway = 2 };

constexpr int kNumAgentCategories = 3;
constexpr int kNumStaticCategories = 2;
constexpr int kNumWeather = 3;
constexpr int kNumTimeOfDay = 3;
constexpr int kNumLocale = 3;

struct AgentSpec {
    AgentCategory category = AgentCategory::Car;
    double cx = 0, cy = 0;       // footprint center, world meters
    double heading = 0;          // footprint heading
    double ext_x = 0, ext_y = 0; // half extents, > 0
    double vx = 0, vy = 0;       // world velocity, m/s
    std::array<float, 3> color = {0, 0, 0};
};

struct StaticElement {
    StaticCategory category = StaticCategory::LaneMarking;
    std::vector<Vec2> polyline;  // >= 2 distinct consecutive points
};

struct AppearanceSpec {
    Weather weather = Weather::Sunny;
    TimeOfDay time_of_day = TimeOfDay::Day;
    Locale locale = Locale::Urban;
};

enum class ScenarioFamily : int {
    Straight = 0,
    TurnLeft = 1,
    TurnRight = 2,
    LaneChange = 3,
    StopAndGo = 4,
    Stationary = 5,
};
constexpr int kNumFamilies = 6;
const char* family_name(ScenarioFamily f);

struct WorldConfig {
    int views = 3;
    int frames = 17;        // must be 1 + 2k
    int image_h = 48;
    int image_w = 80;
    double fps = 12.0;
    double scene_extent = 60.0;   // meters; conditioning normalizes by this
    double kappa_max = 0.3;
    double attitude_limit = 0.2;
    double terrain_roll_amp = 0.05;
    double terrain_pitch_amp = 0.05;
    int max_agents = 3;
    std::array<double, kNumFamilies> family_weights = {0.2, 0.175, 0.175, 0.15, 0.15, 0.15};

    bool valid(std::string* why = nullptr) const;
};

struct Episode {
    Tensor<float> frames;                       // [views, frames, H, W, 3], values in [0,1]
    std::vector<ActionFrame> actions;           // one per frame
    std::vector<EgoState> ego;                  // pose at each frame (integrated actions)
    std::vector<std::vector<AgentSpec>> agents; // per frame
    std::vector<StaticElement> statics;
    AppearanceSpec appearance;
    std::vector<CameraSpec> rig;
    uint64_t seed = 0;
    ScenarioFamily family = ScenarioFamily::Straight;
};

// Fixed 3-pinhole rig: front, front-left (+55 deg), front-right (-55 deg).
std::vector<CameraSpec> default_rig(int image_h, int image_w);

// Terrain attitude used by the episode generator so the roll/pitch action
// channels carry signal.
double terrain_roll(const WorldConfig& cfg, double x, double y);
double terrain_pitch(const WorldConfig& cfg, double x, double y);

// Category palettes and box heights used by both the renderer and the
// evaluation metrics.
double agent_height(AgentCategory c);
std::array<float, 3> agent_color(AgentCategory c);
std::array<float, 3> static_color(StaticCategory c);
std::array<float, 3> sky_color(const AppearanceSpec& app);

// Flat-shaded raycast render of one view. Writes H*W*3 floats.
void render_view(const std::vector<StaticElement>& statics, const std::vector<AgentSpec>& agents,
                 const EgoState& ego, const CameraSpec& cam, const AppearanceSpec& appearance,
                 float* out);

Episode generate_episode(const WorldConfig& cfg, uint64_t seed);

// Samples the scenario family for a seed without rendering (distribution
// tests, balanced eval-set construction).
ScenarioFamily sample_family(const WorldConfig& cfg, uint64_t seed);

// Action profile + scripted agents for a family; used by generate_episode and
// by the harness to build held-out command sets.
std::vector<ActionFrame> scripted_actions(const WorldConfig& cfg, ScenarioFamily family, Rng& rng);

}  // namespace xworld
