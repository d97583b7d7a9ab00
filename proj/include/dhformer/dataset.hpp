#pragma once
#include <map>
#include <string>
#include <vector>

#include "dhformer/rng.hpp"
#include "dhformer/scattering.hpp"
#include "dhformer/tensor.hpp"

namespace dhformer {

// A dataset is a TSV manifest with lines "clear<TAB>depth<TAB>split" where
// split is "train" or "test". Paths are resolved relative to the manifest's
// directory; the path string as written is also the stable key that seeds
// per-record haze parameters, so a dataset moved to another machine yields
// identical synthetic pairs.

struct ManifestEntry {
    std::string clear_path;  // as written in the manifest
    std::string depth_path;
    bool is_train = false;
};

struct Manifest {
    std::string dir;  // directory containing the manifest file
    std::vector<ManifestEntry> entries;

    std::string resolve(const std::string& rel) const;
};

Manifest load_manifest(const std::string& path);

// One record materialized at source resolution.
struct HazePair {
    Tensor clear;         // [3,H,W], [0,1]
    Tensor depth;         // [1,H,W], [0,1]
    HazeParams params;
    Tensor transmission;  // [1,H,W]
    Tensor hazy;          // [3,H,W]
};

HazeParams sample_haze_params(uint64_t seed, const std::string& clear_path);
HazePair make_pair(const Tensor& clear, const Tensor& depth, const HazeParams& params);

// Loads records lazily and keeps them; haze parameters come from
// (seed, manifest path string).
class PairLoader {
public:
    PairLoader(Manifest manifest, uint64_t seed);

    int size() const { return static_cast<int>(manifest_.entries.size()); }
    const ManifestEntry& entry(int i) const { return manifest_.entries.at(i); }
    const HazePair& pair(int i);
    std::vector<int> train_indices() const;
    std::vector<int> test_indices() const;

private:
    Manifest manifest_;
    uint64_t seed_;
    std::map<int, HazePair> cache_;
};

// Pixel-exact spatial rearrangements; applied identically to every plane of
// a pair they cannot break the haze-formation identity.
Tensor spatial_crop(const Tensor& chw, int y0, int x0, int h, int w);
Tensor spatial_hflip(const Tensor& chw);
Tensor spatial_rot90(const Tensor& chw, int quarter_turns);

// Networks train on square crops of this size.
inline constexpr int kTrainSize = 16;

struct TrainExample {
    Tensor hazy;          // [3,S,S]
    Tensor clear;         // [3,S,S]
    Tensor transmission;  // [1,S,S]
};

// Random crop + horizontal flip + right-angle rotation, deterministic in
// (seed, epoch, index). Source must be at least train_size on both axes.
TrainExample augment_to_train(const HazePair& p, uint64_t seed, int epoch, int index,
                              int train_size = kTrainSize);

// Downscales clear and depth, then re-synthesizes haze with the record's own
// parameters (resizing an already-synthesized pair would break the formation
// identity).
TrainExample resize_to_train(const HazePair& p, int train_size = kTrainSize);

struct Batch {
    Tensor hazy;          // [B,3,S,S]
    Tensor clear;         // [B,3,S,S]
    Tensor transmission;  // [B,1,S,S]
};

Batch collate(const std::vector<TrainExample>& examples);

// Shuffled index batches for one epoch: ceil(n/batch_size) batches, the last
// one possibly partial. Deterministic in (seed, epoch).
std::vector<std::vector<int>> epoch_batches(const std::vector<int>& indices, int batch_size,
                                            uint64_t seed, int epoch);

// Writes a small procedural dataset (gradient images, ramp depths) under dir:
// PNG pairs plus manifest.tsv. Returns the manifest path. count entries,
// 3/4 train 1/4 test, images size x size.
std::string write_mini_dataset(const std::string& dir, int count, int size, uint64_t seed);

}  // namespace dhformer
