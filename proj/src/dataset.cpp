#include "dhformer/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dhformer/image_io.hpp"

namespace fs = std::filesystem;

namespace dhformer {

std::string Manifest::resolve(const std::string& rel) const {
    fs::path p(rel);
    if (p.is_absolute()) return rel;
    return (fs::path(dir) / p).string();
}

Manifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest: " + path);
    Manifest m;
    m.dir = fs::path(path).parent_path().string();
    if (m.dir.empty()) m.dir = ".";

    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> fields;
        size_t start = 0;
        while (true) {
            size_t tab = line.find('\t', start);
            fields.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
            if (tab == std::string::npos) break;
            start = tab + 1;
        }
        if (fields.size() != 3)
            throw FormatError("manifest line " + std::to_string(lineno) + ": expected 3 fields, got " +
                              std::to_string(fields.size()));
        ManifestEntry e;
        e.clear_path = fields[0];
        e.depth_path = fields[1];
        if (fields[2] == "train") {
            e.is_train = true;
        } else if (fields[2] == "test") {
            e.is_train = false;
        } else {
            throw FormatError("manifest line " + std::to_string(lineno) +
                              ": split must be train or test, got '" + fields[2] + "'");
        }
        if (e.clear_path.empty() || e.depth_path.empty())
            throw FormatError("manifest line " + std::to_string(lineno) + ": empty path field");
        m.entries.push_back(std::move(e));
    }
    if (m.entries.empty()) throw FormatError("manifest has no entries: " + path);
    return m;
}

HazeParams sample_haze_params(uint64_t seed, const std::string& clear_path) {
    Rng rng(mix_seed(seed, fnv1a64(clear_path)));
    HazeParams p{};
    p.airlight = rng.uniform(0.7, 1.0);
    p.beta = rng.uniform(0.4, 1.6);
    p.validate();
    return p;
}

HazePair make_pair(const Tensor& clear, const Tensor& depth, const HazeParams& params) {
    params.validate();
    if (clear.ndim() != 3 || clear.dim(0) != 3)
        throw DimensionError("make_pair clear must be [3,H,W], got " + shape_str(clear.shape()));
    if (depth.ndim() != 3 || depth.dim(0) != 1)
        throw DimensionError("make_pair depth must be [1,H,W], got " + shape_str(depth.shape()));
    if (clear.dim(1) != depth.dim(1) || clear.dim(2) != depth.dim(2))
        throw DimensionError("make_pair clear/depth size mismatch: " + shape_str(clear.shape()) +
                             " vs " + shape_str(depth.shape()));
    NoGradGuard ng;
    HazePair p;
    p.clear = clear;
    p.depth = depth;
    p.params = params;
    p.transmission = transmission_from_depth(depth, params.beta);
    p.hazy = synthesize_haze(clear, p.transmission, params.airlight);
    return p;
}

PairLoader::PairLoader(Manifest manifest, uint64_t seed)
    : manifest_(std::move(manifest)), seed_(seed) {}

const HazePair& PairLoader::pair(int i) {
    auto it = cache_.find(i);
    if (it != cache_.end()) return it->second;
    const ManifestEntry& e = entry(i);
    Tensor clear = image_to_tensor(read_png(manifest_.resolve(e.clear_path)));
    PngImage dimg = read_png(manifest_.resolve(e.depth_path));
    if (dimg.channels != 1)
        throw FormatError("depth image must be grayscale: " + e.depth_path);
    Tensor depth = depth_to_tensor(dimg);
    HazePair p = make_pair(clear, depth, sample_haze_params(seed_, e.clear_path));
    return cache_.emplace(i, std::move(p)).first->second;
}

std::vector<int> PairLoader::train_indices() const {
    std::vector<int> out;
    for (int i = 0; i < size(); ++i)
        if (manifest_.entries[i].is_train) out.push_back(i);
    return out;
}

std::vector<int> PairLoader::test_indices() const {
    std::vector<int> out;
    for (int i = 0; i < size(); ++i)
        if (!manifest_.entries[i].is_train) out.push_back(i);
    return out;
}

Tensor spatial_crop(const Tensor& chw, int y0, int x0, int h, int w) {
    if (chw.ndim() != 3) throw DimensionError("spatial_crop expects [C,H,W]");
    return narrow(narrow(chw, 1, y0, h), 2, x0, w);
}

Tensor spatial_hflip(const Tensor& chw) {
    if (chw.ndim() != 3) throw DimensionError("spatial_hflip expects [C,H,W]");
    int C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
    Tensor out = Tensor::zeros(chw.shape());
    const auto& src = chw.values();
    auto& dst = out.raw();
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                dst[(static_cast<int64_t>(c) * H + y) * W + x] =
                    src[(static_cast<int64_t>(c) * H + y) * W + (W - 1 - x)];
    return out;
}

Tensor spatial_rot90(const Tensor& chw, int quarter_turns) {
    if (chw.ndim() != 3) throw DimensionError("spatial_rot90 expects [C,H,W]");
    int k = ((quarter_turns % 4) + 4) % 4;
    if (k == 0) return chw.detached();
    int C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
    int OH = (k % 2 == 0) ? H : W;
    int OW = (k % 2 == 0) ? W : H;
    Tensor out = Tensor::zeros({C, OH, OW});
    const auto& src = chw.values();
    auto& dst = out.raw();
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                int oy, ox;  // counterclockwise rotation
                if (k == 1) {
                    oy = W - 1 - x;
                    ox = y;
                } else if (k == 2) {
                    oy = H - 1 - y;
                    ox = W - 1 - x;
                } else {
                    oy = x;
                    ox = H - 1 - y;
                }
                dst[(static_cast<int64_t>(c) * OH + oy) * OW + ox] =
                    src[(static_cast<int64_t>(c) * H + y) * W + x];
            }
    return out;
}

TrainExample augment_to_train(const HazePair& p, uint64_t seed, int epoch, int index,
                              int train_size) {
    int H = p.clear.dim(1), W = p.clear.dim(2);
    if (H < train_size || W < train_size)
        throw DimensionError("source " + std::to_string(W) + "x" + std::to_string(H) +
                             " smaller than train size " + std::to_string(train_size));
    Rng rng(mix_seed(mix_seed(seed, static_cast<uint64_t>(epoch)),
                     static_cast<uint64_t>(index)));
    int y0 = rng.uniform_int(0, H - train_size);
    int x0 = rng.uniform_int(0, W - train_size);
    bool flip = rng.uniform_int(0, 1) == 1;
    int rot = rng.uniform_int(0, 3);

    NoGradGuard ng;
    auto apply = [&](const Tensor& t) {
        Tensor out = spatial_crop(t, y0, x0, train_size, train_size);
        if (flip) out = spatial_hflip(out);
        return spatial_rot90(out, rot);
    };
    return TrainExample{apply(p.hazy), apply(p.clear), apply(p.transmission)};
}

TrainExample resize_to_train(const HazePair& p, int train_size) {
    NoGradGuard ng;
    auto down = [&](const Tensor& chw) {
        Tensor batched = reshape(chw, {1, chw.dim(0), chw.dim(1), chw.dim(2)});
        Tensor r = upsample_bilinear(batched, train_size, train_size);
        return reshape(r, {chw.dim(0), train_size, train_size});
    };
    Tensor clear = clamp(down(p.clear), 0.0, 1.0);
    Tensor depth = clamp(down(p.depth), 0.0, 1.0);
    Tensor t = transmission_from_depth(depth, p.params.beta);
    Tensor hazy = synthesize_haze(clear, t, p.params.airlight);
    return TrainExample{hazy, clear, t};
}

Batch collate(const std::vector<TrainExample>& examples) {
    if (examples.empty()) throw ContractError("collate of empty batch");
    int S = examples[0].hazy.dim(1);
    int B = static_cast<int>(examples.size());
    Batch b{Tensor::zeros({B, 3, S, S}), Tensor::zeros({B, 3, S, S}),
            Tensor::zeros({B, 1, S, S})};
    for (int i = 0; i < B; ++i) {
        const auto& e = examples[i];
        if (e.hazy.shape() != Shape{3, S, S} || e.clear.shape() != Shape{3, S, S} ||
            e.transmission.shape() != Shape{1, S, S})
            throw DimensionError("collate example " + std::to_string(i) + " shape mismatch");
        std::copy(e.hazy.values().begin(), e.hazy.values().end(),
                  b.hazy.raw().begin() + static_cast<int64_t>(i) * 3 * S * S);
        std::copy(e.clear.values().begin(), e.clear.values().end(),
                  b.clear.raw().begin() + static_cast<int64_t>(i) * 3 * S * S);
        std::copy(e.transmission.values().begin(), e.transmission.values().end(),
                  b.transmission.raw().begin() + static_cast<int64_t>(i) * S * S);
    }
    return b;
}

std::vector<std::vector<int>> epoch_batches(const std::vector<int>& indices, int batch_size,
                                            uint64_t seed, int epoch) {
    if (batch_size < 1) throw ContractError("batch_size must be >= 1");
    std::vector<int> order = indices;
    Rng rng(mix_seed(seed, 0x9e3779b97f4a7c15ull ^ static_cast<uint64_t>(epoch)));
    for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) {
        int j = rng.uniform_int(0, i);
        std::swap(order[i], order[j]);
    }
    std::vector<std::vector<int>> batches;
    for (size_t start = 0; start < order.size(); start += batch_size) {
        size_t end = std::min(order.size(), start + batch_size);
        batches.emplace_back(order.begin() + start, order.begin() + end);
    }
    return batches;
}

std::string write_mini_dataset(const std::string& dir, int count, int size, uint64_t seed) {
    if (count < 4) throw ContractError("mini dataset needs at least 4 entries");
    if (size < kTrainSize) throw ContractError("mini dataset image size below train size");
    fs::create_directories(dir);

    int train_count = count * 3 / 4;
    std::ostringstream manifest;
    for (int i = 0; i < count; ++i) {
        Rng rng(mix_seed(seed, 0xda7a5e7ull + static_cast<uint64_t>(i)));

        // two-color gradient with a low-amplitude ripple so windows differ
        double c0[3], c1[3];
        for (int c = 0; c < 3; ++c) {
            c0[c] = rng.uniform(0.1, 0.9);
            c1[c] = rng.uniform(0.1, 0.9);
        }
        double theta = rng.uniform(0.0, 2.0 * M_PI);
        double freq = 1.0 + rng.uniform_int(0, 2);
        double phase = rng.uniform(0.0, 2.0 * M_PI);

        Tensor clear = Tensor::zeros({3, size, size});
        auto& cd = clear.raw();
        double ct = std::cos(theta), st = std::sin(theta);
        double span = (size - 1) * (std::fabs(ct) + std::fabs(st));
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                double proj = x * ct + y * st;
                double u = span > 0 ? (proj + (size - 1) * (std::max(-ct, 0.0) +
                                               std::max(-st, 0.0))) / span
                                    : 0.5;
                double ripple = 0.05 * std::sin(2.0 * M_PI * freq * x / size + phase) *
                                std::cos(2.0 * M_PI * freq * y / size);
                for (int c = 0; c < 3; ++c) {
                    double v = c0[c] + (c1[c] - c0[c]) * u + ripple;
                    cd[(static_cast<int64_t>(c) * size + y) * size + x] =
                        std::min(1.0, std::max(0.0, v));
                }
            }

        // linear ramp depth, random direction and base offset
        double phi = rng.uniform(0.0, 2.0 * M_PI);
        double base = rng.uniform(0.1, 0.4);
        Tensor depth = Tensor::zeros({1, size, size});
        auto& dd = depth.raw();
        double cp = std::cos(phi), sp = std::sin(phi);
        double dspan = (size - 1) * (std::fabs(cp) + std::fabs(sp));
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                double proj = x * cp + y * sp;
                double u = dspan > 0 ? (proj + (size - 1) * (std::max(-cp, 0.0) +
                                                std::max(-sp, 0.0))) / dspan
                                     : 0.5;
                dd[static_cast<int64_t>(y) * size + x] =
                    std::min(1.0, base + (1.0 - base) * u);
            }

        char cname[32], dname[32];
        std::snprintf(cname, sizeof cname, "clear_%03d.png", i);
        std::snprintf(dname, sizeof dname, "depth_%03d.png", i);
        write_png((fs::path(dir) / cname).string(), tensor_to_image(clear));
        write_png((fs::path(dir) / dname).string(), depth_to_png16(depth));
        manifest << cname << '\t' << dname << '\t' << (i < train_count ? "train" : "test")
                 << '\n';
    }

    std::string mpath = (fs::path(dir) / "manifest.tsv").string();
    std::ofstream out(mpath);
    if (!out) throw IoError("cannot write manifest: " + mpath);
    out << manifest.str();
    return mpath;
}

}  // namespace dhformer
