#include "spf/spriteworld.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "spf/errors.hpp"
#include "spf/png_io.hpp"

namespace spf {
namespace {

using Rgb = std::array<std::uint8_t, 3>;

// Fixed color tables. Every entry is distinct so that any painted layer
// changes the pixels it covers.
constexpr std::array<Rgb, kSkinToneCount> kSkinColors{{
    {250, 220, 190},  // light
    {225, 180, 130},  // tan
    {165, 110, 70},   // brown
    {95, 60, 40},     // dark
}};
constexpr std::array<Rgb, kHairColorCount> kHairColors{{
    {25, 25, 25},     // black
    {110, 65, 30},    // brown
    {235, 205, 110},  // blond
    {185, 60, 30},    // red
    {150, 150, 150},  // gray
}};
constexpr std::array<Rgb, kBackgroundCount> kBackgroundColors{{
    {60, 110, 210},   // blue
    {200, 50, 50},    // red
    {60, 160, 80},    // green
    {230, 220, 60},   // yellow
    {130, 70, 170},   // purple
}};
constexpr Rgb kEyeColor{20, 20, 20};
constexpr Rgb kMouthColor{150, 40, 40};
constexpr Rgb kHatColor{200, 120, 20};
constexpr Rgb kGlassesColor{20, 20, 120};
constexpr Rgb kBeardColor{80, 50, 30};
constexpr Rgb kEarringColor{250, 210, 0};

constexpr std::array<std::string_view, kFaceShapeCount> kFaceShapeNames{"round", "oval"};
constexpr std::array<std::string_view, kSkinToneCount> kSkinToneNames{"light", "tan", "brown", "dark"};
constexpr std::array<std::string_view, kHairColorCount> kHairColorNames{"black", "brown", "blond", "red", "gray"};
constexpr std::array<std::string_view, kBackgroundCount> kBackgroundNames{"blue", "red", "green", "yellow", "purple"};
constexpr std::array<std::string_view, kTargetAttrCount> kTargetNames{"hat", "glasses", "smile", "beard", "earring"};
constexpr std::array<std::string_view, kTargetAttrCount> kTargetPhrases{
    "wearing a hat", "wearing glasses", "smiling", "with a beard", "wearing earrings"};

enum class Layer : std::uint8_t { background, skin, hair, eye, mouth, target };

struct Geometry {
    double cx;
    double cy;
    double rx;
    double ry;
    int pose;

    bool in_face(int x, int y) const {
        const double dx = (x - cx) / rx;
        const double dy = (y - cy) / ry;
        return dx * dx + dy * dy <= 1.0;
    }
    bool in_hair(int x, int y) const {
        const double dx = (x - cx) / (rx + 2.0);
        const double dy = (y - (cy - 1.0)) / (ry + 2.0);
        return dx * dx + dy * dy <= 1.0 && (y - cy) <= -0.35 * ry;
    }
};

Geometry geometry(const AttributeVector& a) {
    Geometry g{15.5 + a.pose_offset, 17.5, 8.0, 8.0, a.pose_offset};
    if (a.face_shape == FaceShape::oval) {
        g.rx = 6.5;
        g.ry = 10.0;
    }
    return g;
}

bool in_bounds(int x, int y) { return x >= 0 && y >= 0 && x < kImageSize && y < kImageSize; }

using PixelSet = std::vector<std::pair<int, int>>;  // (x, y)

PixelSet eye_pixels(const Geometry& g) { return {{12 + g.pose, 16}, {19 + g.pose, 16}}; }

PixelSet neutral_mouth(const Geometry& g) {
    PixelSet p;
    for (int x = 14; x <= 17; ++x) p.emplace_back(x + g.pose, 21);
    return p;
}

PixelSet smile_mouth(const Geometry& g) {
    return {{13 + g.pose, 19}, {14 + g.pose, 20}, {15 + g.pose, 21},
            {16 + g.pose, 21}, {17 + g.pose, 20}, {18 + g.pose, 19}};
}

bool contains(const PixelSet& s, int x, int y) {
    return std::find(s.begin(), s.end(), std::make_pair(x, y)) != s.end();
}

int hair_top(const Geometry& g) {
    for (int y = 0; y < kImageSize; ++y)
        for (int x = 0; x < kImageSize; ++x)
            if (g.in_hair(x, y)) return y;
    return 0;
}

/// Pixels painted by the target attribute, excluding mouth pixels a smile
/// merely reverts to skin (those are handled by the diff).
PixelSet target_footprint(const Geometry& g, TargetAttr t) {
    PixelSet p;
    switch (t) {
        case TargetAttr::hat: {
            const int top = hair_top(g);
            for (int y = top - 4; y <= top + 3; ++y) {
                const double half = y <= top + 1 ? 5.5 : 9.5;
                for (int x = 0; x < kImageSize; ++x)
                    if (std::abs(x - g.cx) <= half && in_bounds(x, y)) p.emplace_back(x, y);
            }
            break;
        }
        case TargetAttr::glasses: {
            for (auto [ex, ey] : eye_pixels(g))
                for (int j = -1; j <= 1; ++j)
                    for (int i = -1; i <= 1; ++i)
                        if (i != 0 || j != 0) p.emplace_back(ex + i, ey + j);
            for (int x = 14; x <= 17; ++x) p.emplace_back(x + g.pose, 16);
            break;
        }
        case TargetAttr::smile:
            p = smile_mouth(g);
            break;
        case TargetAttr::beard: {
            const auto mouth = neutral_mouth(g);
            for (int y = 0; y < kImageSize; ++y)
                for (int x = 0; x < kImageSize; ++x)
                    if (g.in_face(x, y) && (y - g.cy) >= 0.35 * g.ry && !contains(mouth, x, y)) p.emplace_back(x, y);
            break;
        }
        case TargetAttr::earring: {
            for (int y = 19; y <= 20; ++y) {
                int first = -1, last = -1;
                for (int x = 0; x < kImageSize; ++x) {
                    if (g.in_face(x, y)) {
                        if (first < 0) first = x;
                        last = x;
                    }
                }
                p.emplace_back(first - 1, y);
                p.emplace_back(last + 1, y);
            }
            break;
        }
    }
    return p;
}

Rgb target_color(TargetAttr t) {
    switch (t) {
        case TargetAttr::hat: return kHatColor;
        case TargetAttr::glasses: return kGlassesColor;
        case TargetAttr::smile: return kMouthColor;
        case TargetAttr::beard: return kBeardColor;
        case TargetAttr::earring: return kEarringColor;
    }
    return kHatColor;
}

void paint(RgbImage& img, int x, int y, const Rgb& c) {
    for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = c[ch];
}

template <std::size_t N>
std::size_t lookup(std::string_view s, const std::array<std::string_view, N>& names, const char* what) {
    for (std::size_t i = 0; i < N; ++i)
        if (names[i] == s) return i;
    throw ConfigError(std::string("unknown ") + what + ": '" + std::string(s) + "'");
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t");
    return std::string(s.substr(b, e - b + 1));
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

}  // namespace

std::size_t Mask::count() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }

void validate(const AttributeVector& a) {
    if (static_cast<int>(a.face_shape) >= kFaceShapeCount) throw ConfigError("invalid face_shape");
    if (static_cast<int>(a.skin_tone) >= kSkinToneCount) throw ConfigError("invalid skin_tone");
    if (static_cast<int>(a.hair_color) >= kHairColorCount) throw ConfigError("invalid hair_color");
    if (static_cast<int>(a.background) >= kBackgroundCount) throw ConfigError("invalid background");
    if (a.target_attr && static_cast<int>(*a.target_attr) >= kTargetAttrCount) throw ConfigError("invalid target_attr");
    if (a.pose_offset < -kPoseLimit || a.pose_offset > kPoseLimit) throw ConfigError("pose_offset out of [-3, 3]");
}

RenderResult render(const AttributeVector& attrs) {
    validate(attrs);
    const Geometry g = geometry(attrs);
    RenderResult out;
    std::vector<Layer> owner(static_cast<std::size_t>(kImageSize) * kImageSize, Layer::background);
    auto own = [&](int x, int y) -> Layer& { return owner[static_cast<std::size_t>(y) * kImageSize + x]; };

    const Rgb bg = kBackgroundColors[static_cast<int>(attrs.background)];
    const Rgb skin = kSkinColors[static_cast<int>(attrs.skin_tone)];
    const Rgb hair = kHairColors[static_cast<int>(attrs.hair_color)];

    for (int y = 0; y < kImageSize; ++y) {
        for (int x = 0; x < kImageSize; ++x) {
            if (g.in_hair(x, y)) {
                paint(out.image, x, y, hair);
                own(x, y) = Layer::hair;
                out.masks.hair.at(y, x) = 1;
            } else if (g.in_face(x, y)) {
                paint(out.image, x, y, skin);
                own(x, y) = Layer::skin;
            } else {
                paint(out.image, x, y, bg);
            }
        }
    }
    for (auto [x, y] : eye_pixels(g)) {
        paint(out.image, x, y, kEyeColor);
        own(x, y) = Layer::eye;
    }
    const bool smiling = attrs.target_attr == TargetAttr::smile;
    for (auto [x, y] : neutral_mouth(g)) {
        if (smiling) continue;
        paint(out.image, x, y, kMouthColor);
        own(x, y) = Layer::mouth;
    }
    if (attrs.target_attr) {
        const TargetAttr t = *attrs.target_attr;
        const Rgb color = target_color(t);
        const auto mouth = neutral_mouth(g);
        for (auto [x, y] : target_footprint(g, t)) {
            if (!in_bounds(x, y)) continue;
            paint(out.image, x, y, color);
            own(x, y) = Layer::target;
            // Smile pixels on the neutral mouth keep the mouth colour.
            if (!(smiling && contains(mouth, x, y))) out.masks.target.at(y, x) = 1;
        }
        if (smiling) {
            // Mouth corners of the neutral mouth revert to skin.
            const auto smile = smile_mouth(g);
            for (auto [x, y] : mouth) {
                if (contains(smile, x, y)) continue;
                out.masks.target.at(y, x) = 1;
            }
        }
    }
    for (int y = 0; y < kImageSize; ++y) {
        for (int x = 0; x < kImageSize; ++x) {
            const Layer l = own(x, y);
            out.masks.background.at(y, x) = l == Layer::background;
            out.masks.face.at(y, x) = l == Layer::skin && !out.masks.target.at(y, x);
        }
    }
    return out;
}

Caption caption(const AttributeVector& attrs) {
    validate(attrs);
    Caption c;
    c.base_text = "a " + std::string(to_string(attrs.face_shape)) + " face, " + std::string(to_string(attrs.skin_tone)) +
                  " skin, " + std::string(to_string(attrs.hair_color)) + " hair, " +
                  std::string(to_string(attrs.background)) + " background";
    if (attrs.target_attr) c.target_text = target_phrase(*attrs.target_attr);
    return c;
}

std::vector<std::string> split_phrases(std::string_view base_text) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= base_text.size()) {
        const auto comma = base_text.find(',', start);
        const auto end = comma == std::string_view::npos ? base_text.size() : comma;
        auto piece = trim(base_text.substr(start, end - start));
        if (!piece.empty()) out.push_back(std::move(piece));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

Mask target_pixel_diff(const AttributeVector& attrs) {
    AttributeVector without = attrs;
    without.target_attr.reset();
    const auto a = render(attrs).image;
    const auto b = render(without).image;
    Mask m;
    for (int y = 0; y < kImageSize; ++y)
        for (int x = 0; x < kImageSize; ++x)
            for (int c = 0; c < 3; ++c)
                if (a.at(y, x, c) != b.at(y, x, c)) m.at(y, x) = 1;
    return m;
}

Mask target_region_any_pose(const AttributeVector& attrs) {
    Mask m;
    if (!attrs.target_attr) return m;
    AttributeVector v = attrs;
    for (int p = -kPoseLimit; p <= kPoseLimit; ++p) {
        v.pose_offset = p;
        const auto t = render(v).masks.target;
        for (std::size_t i = 0; i < m.bits.size(); ++i) m.bits[i] |= t.bits[i];
    }
    return m;
}

PromptTriple make_triple(const AttributeVector& attrs) {
    auto cap = caption(attrs);
    PromptTriple t;
    t.base_text = std::move(cap.base_text);
    t.target_text = std::move(cap.target_text);
    t.image = render(attrs).image;
    t.target_mask = target_pixel_diff(attrs);
    t.attributes = attrs;
    return t;
}

std::vector<PromptTriple> build_dataset(int count, const std::set<std::optional<TargetAttr>>& target_pool,
                                        std::uint64_t seed) {
    if (count <= 0) throw ArgumentError("build_dataset: count must be >= 1");
    if (target_pool.empty()) throw ArgumentError("build_dataset: empty target pool");
    const std::vector<std::optional<TargetAttr>> pool(target_pool.begin(), target_pool.end());
    std::vector<PromptTriple> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        AttributeVector a;
        a.rng_seed = splitmix64(seed * 0x100000001B3ULL + static_cast<std::uint64_t>(i));
        std::mt19937_64 rng(a.rng_seed);
        a.face_shape = static_cast<FaceShape>(rng() % kFaceShapeCount);
        a.skin_tone = static_cast<SkinTone>(rng() % kSkinToneCount);
        a.hair_color = static_cast<HairColor>(rng() % kHairColorCount);
        a.background = static_cast<Background>(rng() % kBackgroundCount);
        a.pose_offset = static_cast<int>(rng() % (2 * kPoseLimit + 1)) - kPoseLimit;
        a.target_attr = pool[rng() % pool.size()];
        out.push_back(make_triple(a));
    }
    return out;
}

std::string_view to_string(FaceShape v) { return kFaceShapeNames.at(static_cast<std::size_t>(v)); }
std::string_view to_string(SkinTone v) { return kSkinToneNames.at(static_cast<std::size_t>(v)); }
std::string_view to_string(HairColor v) { return kHairColorNames.at(static_cast<std::size_t>(v)); }
std::string_view to_string(Background v) { return kBackgroundNames.at(static_cast<std::size_t>(v)); }
std::string_view to_string(TargetAttr v) { return kTargetNames.at(static_cast<std::size_t>(v)); }

FaceShape parse_face_shape(std::string_view s) { return static_cast<FaceShape>(lookup(s, kFaceShapeNames, "face_shape")); }
SkinTone parse_skin_tone(std::string_view s) { return static_cast<SkinTone>(lookup(s, kSkinToneNames, "skin_tone")); }
HairColor parse_hair_color(std::string_view s) { return static_cast<HairColor>(lookup(s, kHairColorNames, "hair_color")); }
Background parse_background(std::string_view s) { return static_cast<Background>(lookup(s, kBackgroundNames, "background")); }
TargetAttr parse_target_attr(std::string_view s) { return static_cast<TargetAttr>(lookup(s, kTargetNames, "target_attr")); }

std::string target_phrase(TargetAttr v) { return std::string(kTargetPhrases.at(static_cast<std::size_t>(v))); }

std::set<std::optional<TargetAttr>> parse_target_pool(std::string_view csv) {
    std::set<std::optional<TargetAttr>> pool;
    std::size_t start = 0;
    while (start <= csv.size()) {
        const auto comma = csv.find(',', start);
        const auto end = comma == std::string_view::npos ? csv.size() : comma;
        const auto name = trim(csv.substr(start, end - start));
        if (name == "none") {
            pool.insert(std::nullopt);
        } else if (!name.empty()) {
            pool.insert(parse_target_attr(name));
        }
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    if (pool.empty()) throw ConfigError("empty target pool");
    return pool;
}

void save_dataset(const std::vector<PromptTriple>& triples, const std::filesystem::path& dir, std::uint64_t seed) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "masks");
    std::ofstream manifest(dir / "manifest.jsonl");
    if (!manifest) throw std::runtime_error("cannot write manifest in " + dir.string());
    for (std::size_t i = 0; i < triples.size(); ++i) {
        const auto& t = triples[i];
        std::ostringstream stem;
        stem << std::setw(6) << std::setfill('0') << i;
        const std::string image_rel = "images/" + stem.str() + ".png";
        const std::string mask_rel = "masks/" + stem.str() + ".png";
        write_png_rgb(dir / image_rel, t.image);
        write_png_mask(dir / mask_rel, t.target_mask);
        const auto& a = t.attributes;
        nlohmann::json rec{
            {"index", i},
            {"image", image_rel},
            {"mask", mask_rel},
            {"base_text", t.base_text},
            {"target_text", t.target_text},
            {"seed", seed},
            {"attributes",
             {{"face_shape", to_string(a.face_shape)},
              {"skin_tone", to_string(a.skin_tone)},
              {"hair_color", to_string(a.hair_color)},
              {"background", to_string(a.background)},
              {"pose_offset", a.pose_offset},
              {"target_attr", a.target_attr ? nlohmann::json(to_string(*a.target_attr)) : nlohmann::json(nullptr)},
              {"rng_seed", a.rng_seed}}},
        };
        manifest << rec.dump() << '\n';
    }
}

std::vector<PromptTriple> load_dataset(const std::filesystem::path& dir) {
    std::ifstream manifest(dir / "manifest.jsonl");
    if (!manifest) throw ArgumentError("no manifest.jsonl in " + dir.string());
    std::vector<PromptTriple> out;
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        const auto rec = nlohmann::json::parse(line);
        const auto& ja = rec.at("attributes");
        AttributeVector a;
        a.face_shape = parse_face_shape(ja.at("face_shape").get<std::string>());
        a.skin_tone = parse_skin_tone(ja.at("skin_tone").get<std::string>());
        a.hair_color = parse_hair_color(ja.at("hair_color").get<std::string>());
        a.background = parse_background(ja.at("background").get<std::string>());
        a.pose_offset = ja.at("pose_offset").get<int>();
        if (!ja.at("target_attr").is_null()) a.target_attr = parse_target_attr(ja.at("target_attr").get<std::string>());
        a.rng_seed = ja.at("rng_seed").get<std::uint64_t>();
        validate(a);
        PromptTriple t;
        t.attributes = a;
        t.base_text = rec.at("base_text").get<std::string>();
        t.target_text = rec.at("target_text").get<std::string>();
        t.image = read_png_rgb(dir / rec.at("image").get<std::string>());
        t.target_mask = read_png_mask(dir / rec.at("mask").get<std::string>());
        if (t.image.height != kImageSize || t.image.width != kImageSize) {
            throw ArgumentError("dataset image has wrong size: " + rec.at("image").get<std::string>());
        }
        out.push_back(std::move(t));
    }
    return out;
}

}  // namespace spf
