#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sarmae/rng.hpp"
#include "sarmae/tensor.hpp"

namespace sarmae {

enum class Aoi { China, Conus, Europe, SouthAmerica, Synthetic };

std::string aoi_name(Aoi a);
Aoi aoi_from_name(const std::string& name);

inline constexpr double kTileSideKm = 4.48;
// documented constant for the "% of Earth's land surface" column
inline constexpr double kEarthLandAreaKm2 = 1.489e8;
inline constexpr int kNumLandCoverClasses = 11;

// 12 channels: [VV, VH, VVminusVH] x [spring, summer, autumn, winter],
// polarization-major
std::vector<std::string> standard_channel_names();

struct TileRecord {
    std::string tile_id;
    Aoi aoi = Aoi::Synthetic;
    double min_lon = 0, min_lat = 0, max_lon = 0, max_lat = 0;
    std::vector<std::string> channel_names = standard_channel_names();
    Tensor pixels;  // [12, S, S], log-amplitude
    std::optional<double> veg_label;       // percent, [0,100]
    std::vector<std::uint8_t> seg_label;   // S*S class ids or empty

    double lat_centroid() const { return 0.5 * (min_lat + max_lat); }
    std::int64_t side() const { return pixels.rank() == 3 ? pixels.dim(1) : 0; }
    void validate() const;
};

// SARTILE1 container: magic "SARTILE1", u16 side, u16 channels, then the f32
// little-endian pixel block; a u8 class-mask block follows when the tile
// carries a segmentation label (presence inferred from the file length).
// Metadata travels in a JSON sidecar at <path>.json.
void write_tile(const TileRecord& rec, const std::string& path);
TileRecord read_tile(const std::string& path);

enum class SplitSet { Train, Val, Test };
std::string split_name(SplitSet s);

struct SplitManifest {
    double band_height_deg = 0.5;
    std::vector<SplitSet> pattern;
    std::map<std::string, SplitSet> entries;

    std::int64_t count(SplitSet s) const;
    std::vector<std::string> ids(SplitSet s) const;
    void save_json(const std::string& path) const;
    static SplitManifest load_json(const std::string& path);
};

struct TileMeta {
    std::string tile_id;
    double lat_centroid = 0;
};

inline std::vector<SplitSet> default_split_pattern() {
    using enum SplitSet;
    return {Train, Train, Train, Val, Test};  // 3:1:1 -> 60:20:20
}

// Latitude-band assignment: band = floor((lat - lat_min)/height), cyclic over
// the pattern. Pure function of its inputs; tiles sharing a band always share
// a split.
SplitManifest band_split(const std::vector<TileMeta>& tiles, double band_height_deg,
                         const std::vector<SplitSet>& pattern);

// Seeded sample of ceil(fraction * |train|) train tiles, nested across
// fractions for a fixed seed.
std::vector<std::string> label_fraction_sample(const SplitManifest& manifest, double fraction,
                                               std::uint64_t seed);

// mean of a coarse vegetation grid (values in [0,100])
double veg_label_from_grid(const Tensor& grid);

struct SynthConfig {
    int tile_size = 64;
    int voronoi_sites = 14;
    double speckle_looks = 16.0;  // gamma shape; log-domain std ~= 0.25
    double lat_min = -60.0, lat_max = 60.0;
};

// Synthetic SAR-like corpus: Voronoi class map, per-class channel signatures,
// multiplicative gamma speckle in log domain, season channels correlated
// within each polarization. Deterministic per (seed, tile index).
std::vector<TileRecord> synth_tiles(int n, std::uint64_t seed, const SynthConfig& cfg = {});

// per-class 12-channel mean signature used by the generator
std::vector<double> synth_class_signature(int cls);
double synth_log_speckle_std(double looks);
bool is_vegetation_class(int cls);

struct AoiStats {
    std::string aoi;
    std::int64_t n_tiles = 0;
    double area_km2 = 0;
    double pct_land_surface = 0;
    double size_gb_estimate = 0;
};

AoiStats aoi_stats_row(const std::string& name, std::int64_t n_tiles, int tile_side_px = 448);
std::vector<AoiStats> aoi_stats(const std::vector<TileRecord>& tiles);
std::string render_aoi_stats(const std::vector<AoiStats>& rows);
std::string render_aoi_stats_csv(const std::vector<AoiStats>& rows);

}  // namespace sarmae
