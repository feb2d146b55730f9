#pragma once

#include <string>
#include <vector>

#include "ubn/tensor.hpp"

namespace ubn {

/// Synthetic scene recipe: a textured clean image attenuated by a field of
/// Gaussian illumination blobs. n_blobs < 0 draws the count from [2,5].
struct SceneSpec {
    int size = 128;  // H = W, multiple of 32
    std::uint64_t seed = 0;
    int n_blobs = -1;
};

struct ImagePair {
    Tensor degraded;  // [1,3,H,W]
    Tensor clean;     // [1,3,H,W]
};

/// Deterministic per seed. degraded = clean * L with L in [0.2, 1], so the
/// degradation only darkens; clean values lie in [0.05, 1].
ImagePair generate_pair(const SceneSpec& spec);

/// Binary PPM (P6, maxval 255). Values are clamped to [0,1] and quantized
/// round(v*255) on write; read maps bytes back to v/255.
void write_ppm(const Tensor& img, const std::string& path);
Tensor read_ppm(const std::string& path);

/// Binary PGM (P5, maxval 255) for single-channel maps in [0,1].
void write_pgm(const Tensor& map, const std::string& path);
Tensor read_pgm(const std::string& path);

/// Shared crop window and flip decisions, applied identically to every image
/// of a sample.
struct AugmentWindow {
    int y0 = 0, x0 = 0, crop = 0;
    bool flip_h = false, flip_v = false;
};

AugmentWindow draw_augment(Rng& rng, int extent, int crop);
Tensor apply_window(const Tensor& img, const AugmentWindow& w);
ImagePair augment(const ImagePair& pair, int crop, std::uint64_t seed);

/// Dataset layout: NNNN_input.ppm / NNNN_gt.ppm / NNNN_mask.pgm plus a
/// meta.json manifest {count, size, seed, format_version}.
void generate_dataset(const std::string& dir, int count, int size, std::uint64_t seed,
                      int n_blobs = -1);

struct LoadedPair {
    int index = 0;
    Tensor degraded, clean;
};

struct Dataset {
    std::vector<LoadedPair> pairs;
    int size = 0;
    int skipped = 0;  // indices listed in the manifest that failed to read
};

Dataset load_dataset(const std::string& dir);

}  // namespace ubn
