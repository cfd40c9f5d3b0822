#include "sarmae/datapipe.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace sarmae {

using nlohmann::json;

std::string aoi_name(Aoi a) {
    switch (a) {
        case Aoi::China: return "China";
        case Aoi::Conus: return "Conus";
        case Aoi::Europe: return "Europe";
        case Aoi::SouthAmerica: return "SouthAmerica";
        case Aoi::Synthetic: return "Synthetic";
    }
    return "?";
}

Aoi aoi_from_name(const std::string& name) {
    for (Aoi a : {Aoi::China, Aoi::Conus, Aoi::Europe, Aoi::SouthAmerica, Aoi::Synthetic})
        if (aoi_name(a) == name) return a;
    throw std::invalid_argument("unknown AOI: " + name);
}

std::vector<std::string> standard_channel_names() {
    std::vector<std::string> out;
    for (const char* pol : {"VV", "VH", "VVminusVH"})
        for (const char* season : {"spring", "summer", "autumn", "winter"})
            out.push_back(std::string(pol) + "_" + season);
    return out;
}

void TileRecord::validate() const {
    if (pixels.rank() != 3 || pixels.dim(0) != 12)
        throw std::invalid_argument("tile " + tile_id + ": pixels must be [12,S,S], got " +
                                    shape_str(pixels.shape()));
    if (pixels.dim(1) != pixels.dim(2))
        throw std::invalid_argument("tile " + tile_id + ": non-square pixel block");
    if (channel_names.size() != 12)
        throw std::invalid_argument("tile " + tile_id + ": sidecar lists " +
                                    std::to_string(channel_names.size()) +
                                    " channels, expected 12");
    if (veg_label && (*veg_label < 0.0 || *veg_label > 100.0))
        throw std::invalid_argument("tile " + tile_id + ": veg_label outside [0,100]");
    if (!seg_label.empty()) {
        if (static_cast<std::int64_t>(seg_label.size()) != pixels.dim(1) * pixels.dim(2))
            throw std::invalid_argument("tile " + tile_id + ": seg mask size mismatch");
        for (auto v : seg_label)
            if (v >= kNumLandCoverClasses)
                throw std::invalid_argument("tile " + tile_id + ": class id " +
                                            std::to_string(v) + " >= 11");
    }
}

namespace {

constexpr char kTileMagic[8] = {'S', 'A', 'R', 'T', 'I', 'L', 'E', '1'};

}  // namespace

void write_tile(const TileRecord& rec, const std::string& path) {
    rec.validate();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os.write(kTileMagic, 8);
    const std::uint16_t side = static_cast<std::uint16_t>(rec.pixels.dim(1));
    const std::uint16_t channels = static_cast<std::uint16_t>(rec.pixels.dim(0));
    os.write(reinterpret_cast<const char*>(&side), 2);
    os.write(reinterpret_cast<const char*>(&channels), 2);
    os.write(reinterpret_cast<const char*>(rec.pixels.raw().data()),
             static_cast<std::streamsize>(rec.pixels.raw().size() * sizeof(float)));
    if (!rec.seg_label.empty())
        os.write(reinterpret_cast<const char*>(rec.seg_label.data()),
                 static_cast<std::streamsize>(rec.seg_label.size()));
    if (!os) throw std::runtime_error("write failed for " + path);

    json side_car;
    side_car["tile_id"] = rec.tile_id;
    side_car["aoi"] = aoi_name(rec.aoi);
    side_car["lon_lat_bounds"] = {rec.min_lon, rec.min_lat, rec.max_lon, rec.max_lat};
    side_car["channel_names"] = rec.channel_names;
    if (rec.veg_label)
        side_car["veg_label"] = *rec.veg_label;
    else
        side_car["veg_label"] = nullptr;
    std::ofstream js(path + ".json");
    js << side_car.dump(2) << "\n";
    if (!js) throw std::runtime_error("write failed for " + path + ".json");
}

TileRecord read_tile(const std::string& path) {
    std::ifstream is(path, std::ios::binary | std::ios::ate);
    if (!is) throw std::runtime_error("cannot open " + path);
    const std::int64_t file_size = static_cast<std::int64_t>(is.tellg());
    is.seekg(0);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kTileMagic, 8) != 0)
        throw std::runtime_error(path + ": bad magic at byte offset 0");
    std::uint16_t side = 0, channels = 0;
    is.read(reinterpret_cast<char*>(&side), 2);
    is.read(reinterpret_cast<char*>(&channels), 2);
    if (!is) throw std::runtime_error(path + ": truncated header at byte offset 8");
    const std::int64_t pix_bytes = static_cast<std::int64_t>(channels) * side * side * 4;
    const std::int64_t mask_bytes = static_cast<std::int64_t>(side) * side;
    const std::int64_t base = 12 + pix_bytes;
    bool has_mask;
    if (file_size == base) {
        has_mask = false;
    } else if (file_size == base + mask_bytes) {
        has_mask = true;
    } else {
        throw std::runtime_error(path + ": truncated pixel block, expected " +
                                 std::to_string(base) + " or " + std::to_string(base + mask_bytes) +
                                 " bytes, got " + std::to_string(file_size));
    }
    TileRecord rec;
    std::vector<float> pix(static_cast<std::size_t>(channels) * side * side);
    is.read(reinterpret_cast<char*>(pix.data()), pix_bytes);
    if (!is) throw std::runtime_error(path + ": read failed in pixel block at byte offset 12");
    rec.pixels = Tensor({channels, side, side}, std::move(pix));
    if (has_mask) {
        rec.seg_label.resize(static_cast<std::size_t>(mask_bytes));
        is.read(reinterpret_cast<char*>(rec.seg_label.data()), mask_bytes);
        if (!is)
            throw std::runtime_error(path + ": read failed in mask block at byte offset " +
                                     std::to_string(base));
    }

    std::ifstream js(path + ".json");
    if (!js) throw std::runtime_error("missing sidecar " + path + ".json");
    json side_car = json::parse(js);
    rec.tile_id = side_car.at("tile_id").get<std::string>();
    rec.aoi = aoi_from_name(side_car.at("aoi").get<std::string>());
    auto bounds = side_car.at("lon_lat_bounds");
    rec.min_lon = bounds.at(0);
    rec.min_lat = bounds.at(1);
    rec.max_lon = bounds.at(2);
    rec.max_lat = bounds.at(3);
    rec.channel_names = side_car.at("channel_names").get<std::vector<std::string>>();
    if (!side_car.at("veg_label").is_null()) rec.veg_label = side_car.at("veg_label").get<double>();
    rec.validate();
    return rec;
}

std::string split_name(SplitSet s) {
    switch (s) {
        case SplitSet::Train: return "train";
        case SplitSet::Val: return "val";
        case SplitSet::Test: return "test";
    }
    return "?";
}

std::int64_t SplitManifest::count(SplitSet s) const {
    std::int64_t n = 0;
    for (const auto& [id, set] : entries) n += (set == s);
    return n;
}

std::vector<std::string> SplitManifest::ids(SplitSet s) const {
    std::vector<std::string> out;
    for (const auto& [id, set] : entries)
        if (set == s) out.push_back(id);
    return out;
}

void SplitManifest::save_json(const std::string& path) const {
    json j;
    j["band_height_deg"] = band_height_deg;
    std::vector<std::string> pat;
    for (auto p : pattern) pat.push_back(split_name(p));
    j["pattern"] = pat;
    json ent = json::object();
    for (const auto& [id, set] : entries) ent[id] = split_name(set);
    j["entries"] = ent;
    j["counts"] = {{"train", count(SplitSet::Train)},
                   {"val", count(SplitSet::Val)},
                   {"test", count(SplitSet::Test)}};
    std::ofstream os(path);
    os << j.dump(2) << "\n";
    if (!os) throw std::runtime_error("write failed for " + path);
}

SplitManifest SplitManifest::load_json(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path);
    json j = json::parse(is);
    SplitManifest m;
    m.band_height_deg = j.at("band_height_deg");
    auto parse_set = [](const std::string& s) {
        for (auto v : {SplitSet::Train, SplitSet::Val, SplitSet::Test})
            if (split_name(v) == s) return v;
        throw std::runtime_error("bad split name: " + s);
    };
    for (const auto& s : j.at("pattern")) m.pattern.push_back(parse_set(s));
    for (auto& [id, set] : j.at("entries").items()) m.entries[id] = parse_set(set);
    return m;
}

SplitManifest band_split(const std::vector<TileMeta>& tiles, double band_height_deg,
                         const std::vector<SplitSet>& pattern) {
    if (tiles.empty()) throw std::invalid_argument("band_split: empty tile list");
    if (band_height_deg <= 0.0) throw std::invalid_argument("band_split: band height must be > 0");
    if (pattern.empty()) throw std::invalid_argument("band_split: empty pattern");
    double lat_min = tiles[0].lat_centroid;
    for (const auto& t : tiles) lat_min = std::min(lat_min, t.lat_centroid);
    SplitManifest m;
    m.band_height_deg = band_height_deg;
    m.pattern = pattern;
    const auto plen = static_cast<std::int64_t>(pattern.size());
    for (const auto& t : tiles) {
        const auto band =
            static_cast<std::int64_t>(std::floor((t.lat_centroid - lat_min) / band_height_deg));
        m.entries[t.tile_id] = pattern[static_cast<std::size_t>(band % plen)];
    }
    return m;
}

std::vector<std::string> label_fraction_sample(const SplitManifest& manifest, double fraction,
                                               std::uint64_t seed) {
    if (fraction <= 0.0 || fraction > 1.0)
        throw std::invalid_argument("label fraction must lie in (0,1]");
    auto train = manifest.ids(SplitSet::Train);
    std::sort(train.begin(), train.end());
    if (fraction >= 1.0) return train;
    Rng rng(seed);
    rng.shuffle(train);
    const auto k = static_cast<std::size_t>(
        std::ceil(fraction * static_cast<double>(train.size())));
    if (k == 0 || train.empty())
        throw std::runtime_error("label_fraction_sample: empty result");
    train.resize(std::min(k, train.size()));
    return train;
}

double veg_label_from_grid(const Tensor& grid) {
    double acc = 0;
    for (float v : grid.raw()) {
        if (v < 0.0f || v > 100.0f)
            throw std::invalid_argument("vegetation grid value " + std::to_string(v) +
                                        " outside [0,100]");
        acc += v;
    }
    return acc / static_cast<double>(grid.numel());
}

std::vector<double> synth_class_signature(int cls) {
    // fixed table: classes are spaced well beyond the speckle std in every
    // channel, with deterministic per-channel jitter so no channel is
    // redundant
    static const std::vector<std::vector<double>> table = [] {
        Rng rng(0xC0FFEEull);
        std::vector<std::vector<double>> t(kNumLandCoverClasses, std::vector<double>(12));
        for (int c = 0; c < kNumLandCoverClasses; ++c)
            for (int ch = 0; ch < 12; ++ch)
                t[c][ch] = -18.0 + 1.2 * c + 0.25 * ch + 0.3 * rng.normal();
        return t;
    }();
    return table.at(static_cast<std::size_t>(cls));
}

double synth_log_speckle_std(double looks) {
    // std of ln Gamma(k, 1/k) = sqrt(trigamma(k)); series approximation
    const double k = looks;
    return std::sqrt(1.0 / k + 1.0 / (2.0 * k * k) + 1.0 / (6.0 * k * k * k));
}

bool is_vegetation_class(int cls) { return cls >= 0 && cls <= 3; }

std::vector<TileRecord> synth_tiles(int n, std::uint64_t seed, const SynthConfig& cfg) {
    if (n < 1) throw std::invalid_argument("synth_tiles: n must be >= 1");
    const int S = cfg.tile_size;
    const double sigma = synth_log_speckle_std(cfg.speckle_looks);
    // learnability check on the signature table
    for (int a = 0; a < kNumLandCoverClasses; ++a)
        for (int b = a + 1; b < kNumLandCoverClasses; ++b) {
            const auto sa = synth_class_signature(a), sb = synth_class_signature(b);
            double d2 = 0;
            for (int ch = 0; ch < 12; ++ch) d2 += (sa[ch] - sb[ch]) * (sa[ch] - sb[ch]);
            if (std::sqrt(d2) < 2.0 * sigma)
                throw std::logic_error("synthetic class signatures not separable");
        }

    const double tile_deg = kTileSideKm / 111.0;
    std::vector<TileRecord> out;
    out.reserve(static_cast<std::size_t>(n));
    Rng base(seed);
    for (int t = 0; t < n; ++t) {
        Rng rng = base.fork(static_cast<std::uint64_t>(t));
        TileRecord rec;
        rec.tile_id = "synthetic_" + std::to_string(seed) + "_" + std::to_string(t);
        rec.aoi = Aoi::Synthetic;
        rec.min_lat = cfg.lat_min + rng.uniform() * (cfg.lat_max - cfg.lat_min - tile_deg);
        rec.max_lat = rec.min_lat + tile_deg;
        rec.min_lon = -180.0 + rng.uniform() * (360.0 - tile_deg);
        rec.max_lon = rec.min_lon + tile_deg;

        // Voronoi class map
        std::vector<double> sy(cfg.voronoi_sites), sx(cfg.voronoi_sites);
        std::vector<int> scls(cfg.voronoi_sites);
        for (int i = 0; i < cfg.voronoi_sites; ++i) {
            sy[i] = rng.uniform() * S;
            sx[i] = rng.uniform() * S;
            scls[i] = static_cast<int>(rng.uniform_int(kNumLandCoverClasses));
        }
        rec.seg_label.resize(static_cast<std::size_t>(S) * S);
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x) {
                double best = 1e300;
                int cls = 0;
                for (int i = 0; i < cfg.voronoi_sites; ++i) {
                    const double d =
                        (y - sy[i]) * (y - sy[i]) + (x - sx[i]) * (x - sx[i]);
                    if (d < best) {
                        best = d;
                        cls = scls[i];
                    }
                }
                rec.seg_label[static_cast<std::size_t>(y) * S + x] =
                    static_cast<std::uint8_t>(cls);
            }

        // channels: per-polarization shared speckle, small per-season noise
        std::vector<float> pix(static_cast<std::size_t>(12) * S * S);
        for (int p = 0; p < 3; ++p) {
            for (int y = 0; y < S; ++y)
                for (int x = 0; x < S; ++x) {
                    const int cls = rec.seg_label[static_cast<std::size_t>(y) * S + x];
                    const auto sig = synth_class_signature(cls);
                    const double speckle =
                        std::log(rng.gamma(cfg.speckle_looks, 1.0 / cfg.speckle_looks));
                    for (int s = 0; s < 4; ++s) {
                        const int ch = p * 4 + s;
                        pix[(static_cast<std::size_t>(ch) * S + y) * S + x] = static_cast<float>(
                            sig[ch] + speckle + 0.1 * rng.normal());
                    }
                }
        }
        rec.pixels = Tensor({12, S, S}, std::move(pix));

        std::int64_t veg = 0;
        for (auto c : rec.seg_label) veg += is_vegetation_class(c);
        rec.veg_label = 100.0 * static_cast<double>(veg) / static_cast<double>(S * S);
        out.push_back(std::move(rec));
    }
    return out;
}

AoiStats aoi_stats_row(const std::string& name, std::int64_t n_tiles, int tile_side_px) {
    AoiStats s;
    s.aoi = name;
    s.n_tiles = n_tiles;
    s.area_km2 = static_cast<double>(n_tiles) * kTileSideKm * kTileSideKm;
    s.pct_land_surface = 100.0 * s.area_km2 / kEarthLandAreaKm2;
    // raw f32 pixel payload
    s.size_gb_estimate = static_cast<double>(n_tiles) *
                         (static_cast<double>(tile_side_px) * tile_side_px * 12 * 4) /
                         (1024.0 * 1024.0 * 1024.0);
    return s;
}

std::vector<AoiStats> aoi_stats(const std::vector<TileRecord>& tiles) {
    std::map<std::string, std::int64_t> counts;
    int side = 448;
    for (const auto& t : tiles) {
        counts[aoi_name(t.aoi)]++;
        side = static_cast<int>(t.side());
    }
    std::vector<AoiStats> rows;
    for (const auto& [name, n] : counts) rows.push_back(aoi_stats_row(name, n, side));
    return rows;
}

std::string render_aoi_stats(const std::vector<AoiStats>& rows) {
    std::ostringstream os;
    os << std::left << std::setw(14) << "AOI" << std::right << std::setw(12) << "Tiles"
       << std::setw(14) << "Area(km2)" << std::setw(10) << "%Land" << std::setw(12) << "Size(GB)"
       << "\n";
    for (const auto& r : rows) {
        os << std::left << std::setw(14) << r.aoi << std::right << std::setw(12) << r.n_tiles
           << std::setw(14) << std::setprecision(4) << std::scientific << r.area_km2
           << std::fixed << std::setw(9) << std::setprecision(1) << r.pct_land_surface << "%"
           << std::setw(12) << std::setprecision(1) << r.size_gb_estimate << "\n";
    }
    return os.str();
}

std::string render_aoi_stats_csv(const std::vector<AoiStats>& rows) {
    std::ostringstream os;
    os << "aoi,n_tiles,area_km2,pct_land_surface,size_gb_estimate\n";
    for (const auto& r : rows)
        os << r.aoi << "," << r.n_tiles << "," << std::setprecision(10) << r.area_km2 << ","
           << r.pct_land_surface << "," << r.size_gb_estimate << "\n";
    return os.str();
}

}  // namespace sarmae
