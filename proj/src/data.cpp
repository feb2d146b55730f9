#include "ubn/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "ubn/losses.hpp"

namespace fs = std::filesystem;

namespace ubn {

// ---------------------------------------------------------------------------
// synthesis
// ---------------------------------------------------------------------------

ImagePair generate_pair(const SceneSpec& spec) {
    if (spec.size < 32 || spec.size % 32 != 0)
        throw ShapeError("generate_pair: size must be a positive multiple of 32, got " +
                         std::to_string(spec.size));
    const int s = spec.size;
    const std::int64_t plane = std::int64_t(s) * s;
    Rng rng(spec.seed);

    Tensor clean = Tensor::zeros({1, 3, s, s});
    double* cd = clean.data();

    // Smooth base: per-channel offset plus a few low-frequency cosine fields.
    double base[3];
    for (double& b : base) b = rng.uniform(0.35, 0.7);
    const int n_fields = 2 + static_cast<int>(rng.below(2));
    struct Field {
        double fx, fy, phase, amp, gain[3];
    };
    std::vector<Field> fields(static_cast<std::size_t>(n_fields));
    for (Field& f : fields) {
        f.fx = 1.0 + static_cast<double>(rng.below(4));
        f.fy = 1.0 + static_cast<double>(rng.below(4));
        f.phase = rng.uniform(0.0, 6.283185307179586);
        f.amp = rng.uniform(0.05, 0.14);
        for (double& g : f.gain) g = rng.uniform(0.5, 1.0);
    }
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            double v = 0.0;
            for (const Field& f : fields)
                v += f.amp * std::cos(6.283185307179586 * (f.fx * x + f.fy * y) / s + f.phase);
            for (int c = 0; c < 3; ++c) {
                double px = base[c] + v * fields[0].gain[c];
                cd[c * plane + std::int64_t(y) * s + x] = px;
            }
        }

    // Solid shapes give the scene sharp structure.
    const int n_shapes = 1 + static_cast<int>(rng.below(3));
    for (int i = 0; i < n_shapes; ++i) {
        const bool disk = rng.below(2) == 0;
        const double cx = rng.uniform(0.1, 0.9) * s;
        const double cy = rng.uniform(0.1, 0.9) * s;
        const double half = rng.uniform(0.06, 0.18) * s;
        double color[3];
        for (double& c : color) c = rng.uniform(0.1, 0.95);
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) {
                const double dx = x - cx, dy = y - cy;
                const bool inside = disk ? (dx * dx + dy * dy <= half * half)
                                         : (std::fabs(dx) <= half && std::fabs(dy) <= half);
                if (inside)
                    for (int c = 0; c < 3; ++c)
                        cd[c * plane + std::int64_t(y) * s + x] = color[c];
            }
    }
    for (std::int64_t i = 0; i < 3 * plane; ++i) cd[i] = store_rounded(std::clamp(cd[i], 0.05, 1.0));

    // Multiplicative attenuation field from Gaussian blobs.
    const int n_blobs = spec.n_blobs >= 0 ? spec.n_blobs : 2 + static_cast<int>(rng.below(4));
    struct Blob {
        double cx, cy, radius, depth;
    };
    std::vector<Blob> blobs(static_cast<std::size_t>(n_blobs));
    for (Blob& b : blobs) {
        b.cx = rng.uniform(0.05, 0.95) * s;
        b.cy = rng.uniform(0.05, 0.95) * s;
        b.radius = rng.uniform(0.06, 0.13) * s;
        b.depth = rng.uniform(0.35, 0.8);
    }
    Tensor degraded = Tensor::zeros({1, 3, s, s});
    double* dd = degraded.data();
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            double att = 0.0;
            for (const Blob& b : blobs) {
                const double dx = x - b.cx, dy = y - b.cy;
                att += b.depth * std::exp(-(dx * dx + dy * dy) / (2.0 * b.radius * b.radius));
            }
            const double l = std::clamp(1.0 - att, 0.2, 1.0);
            for (int c = 0; c < 3; ++c) {
                const std::int64_t i = c * plane + std::int64_t(y) * s + x;
                dd[i] = store_rounded(cd[i] * l);
            }
        }
    return {degraded, clean};
}

// ---------------------------------------------------------------------------
// netpbm IO
// ---------------------------------------------------------------------------

namespace {

std::uint8_t quantize(double v) {
    const double c = std::clamp(v, 0.0, 1.0);
    return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

// Reads one whitespace-delimited header token, skipping '#' comments.
std::string next_token(std::istream& in) {
    std::string tok;
    int ch;
    while ((ch = in.get()) != EOF) {
        if (ch == '#') {
            while ((ch = in.get()) != EOF && ch != '\n') {
            }
            continue;
        }
        if (std::isspace(ch)) {
            if (!tok.empty()) break;
            continue;
        }
        tok.push_back(static_cast<char>(ch));
    }
    return tok;
}

struct PnmHeader {
    int w = 0, h = 0;
};

PnmHeader read_header(std::istream& in, const char* magic, const std::string& path) {
    char m[2];
    in.read(m, 2);
    if (in.gcount() != 2 || m[0] != magic[0] || m[1] != magic[1])
        throw IoError(std::string("bad ") + magic + " magic in " + path);
    PnmHeader hd;
    try {
        hd.w = std::stoi(next_token(in));
        hd.h = std::stoi(next_token(in));
        const int maxval = std::stoi(next_token(in));
        if (maxval != 255) throw IoError("unsupported maxval (expected 255) in " + path);
    } catch (const std::invalid_argument&) {
        throw IoError("malformed header in " + path);
    }
    if (hd.w < 1 || hd.h < 1) throw IoError("malformed extents in " + path);
    return hd;
}

}  // namespace

void write_ppm(const Tensor& img, const std::string& path) {
    if (img.rank() != 4 || img.extent(0) != 1 || img.extent(1) != 3)
        throw ShapeError("write_ppm: image must be [1,3,H,W]");
    const int h = img.extent(2), w = img.extent(3);
    const std::int64_t plane = std::int64_t(h) * w;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out << "P6\n" << w << " " << h << "\n255\n";
    std::vector<std::uint8_t> row(static_cast<std::size_t>(w) * 3);
    const double* d = img.data();
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                row[static_cast<std::size_t>(x) * 3 + static_cast<std::size_t>(c)] =
                    quantize(d[c * plane + std::int64_t(y) * w + x]);
        out.write(reinterpret_cast<const char*>(row.data()),
                  static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw IoError("failed writing " + path);
}

Tensor read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    const PnmHeader hd = read_header(in, "P6", path);
    Tensor img = Tensor::zeros({1, 3, hd.h, hd.w});
    const std::int64_t plane = std::int64_t(hd.h) * hd.w;
    std::vector<std::uint8_t> row(static_cast<std::size_t>(hd.w) * 3);
    double* d = img.data();
    for (int y = 0; y < hd.h; ++y) {
        in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
        if (in.gcount() != static_cast<std::streamsize>(row.size()))
            throw IoError("truncated pixel payload in " + path);
        for (int x = 0; x < hd.w; ++x)
            for (int c = 0; c < 3; ++c)
                d[c * plane + std::int64_t(y) * hd.w + x] = store_rounded(
                    row[static_cast<std::size_t>(x) * 3 + static_cast<std::size_t>(c)] / 255.0);
    }
    return img;
}

void write_pgm(const Tensor& map, const std::string& path) {
    if (map.rank() != 4 || map.extent(0) != 1 || map.extent(1) != 1)
        throw ShapeError("write_pgm: map must be [1,1,H,W]");
    const int h = map.extent(2), w = map.extent(3);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out << "P5\n" << w << " " << h << "\n255\n";
    std::vector<std::uint8_t> row(static_cast<std::size_t>(w));
    const double* d = map.data();
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x)
            row[static_cast<std::size_t>(x)] = quantize(d[std::int64_t(y) * w + x]);
        out.write(reinterpret_cast<const char*>(row.data()),
                  static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw IoError("failed writing " + path);
}

Tensor read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    const PnmHeader hd = read_header(in, "P5", path);
    Tensor map = Tensor::zeros({1, 1, hd.h, hd.w});
    std::vector<std::uint8_t> row(static_cast<std::size_t>(hd.w));
    double* d = map.data();
    for (int y = 0; y < hd.h; ++y) {
        in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
        if (in.gcount() != static_cast<std::streamsize>(row.size()))
            throw IoError("truncated pixel payload in " + path);
        for (int x = 0; x < hd.w; ++x)
            d[std::int64_t(y) * hd.w + x] = store_rounded(row[static_cast<std::size_t>(x)] / 255.0);
    }
    return map;
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

AugmentWindow draw_augment(Rng& rng, int extent, int crop) {
    if (crop > extent) throw ContractError("augment: crop exceeds image extent");
    if (crop < 32 || crop % 32 != 0)
        throw ContractError("augment: crop must be a positive multiple of 32");
    AugmentWindow w;
    w.crop = crop;
    w.y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(extent - crop + 1)));
    w.x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(extent - crop + 1)));
    w.flip_h = rng.below(2) == 1;
    w.flip_v = rng.below(2) == 1;
    return w;
}

Tensor apply_window(const Tensor& img, const AugmentWindow& w) {
    const int n = img.extent(0), c = img.extent(1), h = img.extent(2), wd = img.extent(3);
    if (w.y0 < 0 || w.x0 < 0 || w.y0 + w.crop > h || w.x0 + w.crop > wd)
        throw ContractError("augment: window out of range");
    Tensor out = Tensor::zeros({n, c, w.crop, w.crop});
    const double* src = img.data();
    double* dst = out.data();
    for (int i = 0; i < n * c; ++i)
        for (int y = 0; y < w.crop; ++y) {
            const int sy = w.flip_v ? w.y0 + w.crop - 1 - y : w.y0 + y;
            for (int x = 0; x < w.crop; ++x) {
                const int sx = w.flip_h ? w.x0 + w.crop - 1 - x : w.x0 + x;
                dst[(std::int64_t(i) * w.crop + y) * w.crop + x] =
                    src[(std::int64_t(i) * h + sy) * wd + sx];
            }
        }
    return out;
}

ImagePair augment(const ImagePair& pair, int crop, std::uint64_t seed) {
    Rng rng(seed);
    const AugmentWindow w = draw_augment(rng, pair.degraded.extent(2), crop);
    return {apply_window(pair.degraded, w), apply_window(pair.clean, w)};
}

// ---------------------------------------------------------------------------
// dataset directory
// ---------------------------------------------------------------------------

namespace {

std::string index_name(int i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d", i);
    return buf;
}

}  // namespace

void generate_dataset(const std::string& dir, int count, int size, std::uint64_t seed,
                      int n_blobs) {
    if (count < 1) throw ContractError("generate_dataset: count must be >= 1");
    fs::create_directories(dir);
    for (int i = 0; i < count; ++i) {
        SceneSpec spec;
        spec.size = size;
        spec.seed = seed + static_cast<std::uint64_t>(i);
        spec.n_blobs = n_blobs;
        const ImagePair pair = generate_pair(spec);
        const std::string stem = dir + "/" + index_name(i);
        write_ppm(pair.degraded, stem + "_input.ppm");
        write_ppm(pair.clean, stem + "_gt.ppm");
        write_pgm(build_pseudo_mask(pair.degraded, pair.clean), stem + "_mask.pgm");
    }
    nlohmann::json meta;
    meta["count"] = count;
    meta["size"] = size;
    meta["seed"] = seed;
    meta["format_version"] = 1;
    std::ofstream out(dir + "/meta.json", std::ios::trunc);
    if (!out) throw IoError("cannot write " + dir + "/meta.json");
    out << meta.dump(2) << "\n";
}

Dataset load_dataset(const std::string& dir) {
    std::ifstream in(dir + "/meta.json");
    if (!in) throw IoError("cannot open " + dir + "/meta.json");
    nlohmann::json meta;
    try {
        in >> meta;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed meta.json in " + dir + ": " + e.what());
    }
    Dataset ds;
    const int count = meta.value("count", 0);
    ds.size = meta.value("size", 0);
    for (int i = 0; i < count; ++i) {
        const std::string stem = dir + "/" + index_name(i);
        try {
            LoadedPair p;
            p.index = i;
            p.degraded = read_ppm(stem + "_input.ppm");
            p.clean = read_ppm(stem + "_gt.ppm");
            if (p.degraded.shape() != p.clean.shape())
                throw IoError("pair " + index_name(i) + " has mismatched extents");
            ds.pairs.push_back(std::move(p));
        } catch (const IoError& e) {
            std::fprintf(stderr, "warning: skipping pair %s: %s\n", index_name(i).c_str(),
                         e.what());
            ++ds.skipped;
        }
    }
    if (ds.pairs.empty()) throw IoError("dataset " + dir + " contains no readable pairs");
    return ds;
}

}  // namespace ubn
