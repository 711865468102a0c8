#pragma once

// Procedural portrait sprites: parametric 32x32 faces with captioned
// attributes and exact per-attribute pixel masks.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace spf {

inline constexpr int kImageSize = 32;
inline constexpr int kPoseLimit = 3;

enum class FaceShape : std::uint8_t { round, oval };
enum class SkinTone : std::uint8_t { light, tan, brown, dark };
enum class HairColor : std::uint8_t { black, brown, blond, red, gray };
enum class Background : std::uint8_t { blue, red, green, yellow, purple };
enum class TargetAttr : std::uint8_t { hat, glasses, smile, beard, earring };

inline constexpr int kFaceShapeCount = 2;
inline constexpr int kSkinToneCount = 4;
inline constexpr int kHairColorCount = 5;
inline constexpr int kBackgroundCount = 5;
inline constexpr int kTargetAttrCount = 5;

struct AttributeVector {
    FaceShape face_shape = FaceShape::round;
    SkinTone skin_tone = SkinTone::light;
    HairColor hair_color = HairColor::brown;
    Background background = Background::blue;
    int pose_offset = 0;  // horizontal shift in pixels, [-3, 3]
    std::optional<TargetAttr> target_attr;
    std::uint64_t rng_seed = 0;

    bool operator==(const AttributeVector&) const = default;
};

/// 8-bit RGB raster, row-major HWC. Unit-range value = byte / 255.
struct RgbImage {
    int height = kImageSize;
    int width = kImageSize;
    std::vector<std::uint8_t> rgb = std::vector<std::uint8_t>(kImageSize * kImageSize * 3, 0);

    std::uint8_t& at(int y, int x, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    std::uint8_t at(int y, int x, int c) const { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    float unit(int y, int x, int c) const { return static_cast<float>(at(y, x, c)) / 255.0f; }

    bool operator==(const RgbImage&) const = default;
};

/// Binary H x W mask, one byte per pixel (0 or 1).
struct Mask {
    int height = kImageSize;
    int width = kImageSize;
    std::vector<std::uint8_t> bits = std::vector<std::uint8_t>(kImageSize * kImageSize, 0);

    std::uint8_t& at(int y, int x) { return bits[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t at(int y, int x) const { return bits[static_cast<std::size_t>(y) * width + x]; }
    std::size_t count() const;

    bool operator==(const Mask&) const = default;
};

/// Pixels each attribute controls. Only hair and target (hat) may overlap.
struct AttributeMasks {
    Mask face;        // visible skin
    Mask hair;        // hair footprint, including parts under a hat
    Mask background;  // visible background
    Mask target;      // all-zero when no target attribute
};

struct RenderResult {
    RgbImage image;
    AttributeMasks masks;
};

struct PromptTriple {
    std::string base_text;
    std::string target_text;
    RgbImage image;
    Mask target_mask;
    AttributeVector attributes;
};

struct Caption {
    std::string base_text;
    std::string target_text;
};

/// Throws ConfigError when any enum is outside its table or the pose is out of range.
void validate(const AttributeVector& attrs);

RenderResult render(const AttributeVector& attrs);
Caption caption(const AttributeVector& attrs);

/// Split a base caption into its comma-delimited phrases (trimmed, empty pieces dropped).
std::vector<std::string> split_phrases(std::string_view base_text);

/// Exact nonzero set of |render(attrs) - render(attrs without target)|.
Mask target_pixel_diff(const AttributeVector& attrs);

/// Union of the target mask over every pose offset. Used where the pose of a
/// generated sample is unknown.
Mask target_region_any_pose(const AttributeVector& attrs);

PromptTriple make_triple(const AttributeVector& attrs);

/// `target_pool` entries of std::nullopt mean "no target attribute".
std::vector<PromptTriple> build_dataset(int count, const std::set<std::optional<TargetAttr>>& target_pool,
                                        std::uint64_t seed);

// Name tables. Parsing throws ConfigError for unknown names.
std::string_view to_string(FaceShape v);
std::string_view to_string(SkinTone v);
std::string_view to_string(HairColor v);
std::string_view to_string(Background v);
std::string_view to_string(TargetAttr v);
FaceShape parse_face_shape(std::string_view s);
SkinTone parse_skin_tone(std::string_view s);
HairColor parse_hair_color(std::string_view s);
Background parse_background(std::string_view s);
TargetAttr parse_target_attr(std::string_view s);
std::string target_phrase(TargetAttr v);

/// Parses "hat,glasses,none" into a target pool.
std::set<std::optional<TargetAttr>> parse_target_pool(std::string_view csv);

// Directory serialization: images/NNNNNN.png, masks/NNNNNN.png, manifest.jsonl.
void save_dataset(const std::vector<PromptTriple>& triples, const std::filesystem::path& dir, std::uint64_t seed);
std::vector<PromptTriple> load_dataset(const std::filesystem::path& dir);

}  // namespace spf
