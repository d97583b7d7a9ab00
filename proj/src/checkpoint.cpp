#include "dhformer/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace dhformer {

using nlohmann::json;

namespace {

json arch_to_json(const ArchConfig& a) {
    return json{{"input_size", a.input_size},       {"trans_channels", a.trans_channels},
                {"slice_groups", a.slice_groups},   {"residual_depth", a.residual_depth},
                {"residual_width", a.residual_width}, {"t_min", a.t_min}};
}

ArchConfig arch_from_json(const json& j) {
    ArchConfig a;
    a.input_size = j.at("input_size").get<int>();
    a.trans_channels = j.at("trans_channels").get<int>();
    a.slice_groups = j.at("slice_groups").get<int>();
    a.residual_depth = j.at("residual_depth").get<int>();
    a.residual_width = j.at("residual_width").get<int>();
    a.t_min = j.at("t_min").get<double>();
    return a;
}

json enc_to_json(const EncoderConfig& e) {
    return json{{"embed_dim", e.embed_dim},   {"n_layers", e.n_layers},
                {"heads", e.heads},           {"mlp_ratio", e.mlp_ratio},
                {"use_global_tokens", e.use_global_tokens},
                {"global_count", e.global_count},
                {"patch", e.patch}};
}

EncoderConfig enc_from_json(const json& j) {
    EncoderConfig e;
    e.embed_dim = j.at("embed_dim").get<int>();
    e.n_layers = j.at("n_layers").get<int>();
    e.heads = j.at("heads").get<int>();
    e.mlp_ratio = j.at("mlp_ratio").get<double>();
    e.use_global_tokens = j.at("use_global_tokens").get<bool>();
    e.global_count = j.at("global_count").get<int>();
    e.patch = j.at("patch").get<int>();
    return e;
}

json tensor_dir(const std::map<std::string, Tensor>& tensors, int64_t& offset) {
    json dir = json::array();
    for (const auto& [name, t] : tensors) {
        json entry;
        entry["name"] = name;
        entry["shape"] = t.shape();
        entry["offset"] = offset;
        entry["count"] = t.numel();
        dir.push_back(entry);
        offset += t.numel();
    }
    return dir;
}

void append_f32(std::string& out, const std::map<std::string, Tensor>& tensors) {
    for (const auto& [name, t] : tensors) {
        for (double v : t.values()) {
            float f = static_cast<float>(v);
            char b[4];
            std::memcpy(b, &f, 4);
            out.append(b, 4);
        }
    }
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelParams& mp,
                     const CheckpointMeta& meta) {
    json header;
    header["arch"] = arch_to_json(meta.model.arch);
    header["encoder"] = enc_to_json(meta.model.enc);
    header["ablation"] = meta.ablation;
    header["seed"] = meta.seed;
    header["epoch"] = meta.epoch;
    if (std::isnan(meta.best_val_loss))
        header["best_val_loss"] = nullptr;
    else
        header["best_val_loss"] = meta.best_val_loss;
    header["optimizer"] = meta.optimizer;
    header["learning_rate"] = meta.learning_rate;
    header["batch_size"] = meta.batch_size;
    header["precision"] = meta.precision;

    int64_t offset = 0;
    header["params"] = tensor_dir(mp.params, offset);
    header["buffers"] = tensor_dir(mp.buffers, offset);

    std::string htext = header.dump();
    std::string blob;
    blob.reserve(16 + htext.size() + offset * 4);
    blob.append("DHFM", 4);
    uint32_t ver = kCheckpointVersion;
    uint64_t hlen = htext.size();
    blob.append(reinterpret_cast<const char*>(&ver), 4);
    blob.append(reinterpret_cast<const char*>(&hlen), 8);
    blob += htext;
    append_f32(blob, mp.params);
    append_f32(blob, mp.buffers);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint: " + path);
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw IoError("short write on checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read checkpoint: " + path);
    std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (blob.size() < 16 || blob.compare(0, 4, "DHFM") != 0)
        throw FormatError("bad checkpoint magic at byte 0: " + path);
    uint32_t ver;
    std::memcpy(&ver, blob.data() + 4, 4);
    if (ver != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(ver) +
                          " at byte 4: " + path);
    uint64_t hlen;
    std::memcpy(&hlen, blob.data() + 8, 8);
    if (16 + hlen > blob.size())
        throw FormatError("header length " + std::to_string(hlen) +
                          " overruns file at byte 8: " + path);

    json header;
    try {
        header = json::parse(blob.substr(16, hlen));
    } catch (const json::exception& e) {
        throw FormatError("unparsable checkpoint header at byte 16: " + std::string(e.what()));
    }

    Checkpoint ck;
    try {
        ck.meta.model.arch = arch_from_json(header.at("arch"));
        ck.meta.model.enc = enc_from_json(header.at("encoder"));
        ck.meta.ablation = header.at("ablation").get<std::string>();
        ck.meta.seed = header.at("seed").get<uint64_t>();
        ck.meta.epoch = header.at("epoch").get<int>();
        ck.meta.best_val_loss = header.at("best_val_loss").is_null()
                                    ? std::numeric_limits<double>::quiet_NaN()
                                    : header.at("best_val_loss").get<double>();
        ck.meta.optimizer = header.at("optimizer").get<std::string>();
        ck.meta.learning_rate = header.at("learning_rate").get<double>();
        ck.meta.batch_size = header.at("batch_size").get<int>();
        ck.meta.precision = header.at("precision").get<std::string>();
    } catch (const json::exception& e) {
        throw FormatError("incomplete checkpoint header: " + std::string(e.what()));
    }

    // validate the whole directory before materializing any tensor
    struct Entry {
        std::string name;
        Shape shape;
        int64_t offset, count;
        bool is_buffer;
    };
    std::vector<Entry> entries;
    int64_t expected_offset = 0;
    for (bool is_buffer : {false, true}) {
        const json& dir = header.at(is_buffer ? "buffers" : "params");
        for (const auto& e : dir) {
            Entry en;
            en.name = e.at("name").get<std::string>();
            en.shape = e.at("shape").get<Shape>();
            en.offset = e.at("offset").get<int64_t>();
            en.count = e.at("count").get<int64_t>();
            en.is_buffer = is_buffer;
            if (shape_numel(en.shape) != en.count)
                throw FormatError("checkpoint entry '" + en.name + "': shape " +
                                  shape_str(en.shape) + " does not hold " +
                                  std::to_string(en.count) + " elements");
            if (en.offset != expected_offset)
                throw FormatError("checkpoint entry '" + en.name + "': offset " +
                                  std::to_string(en.offset) + ", expected " +
                                  std::to_string(expected_offset));
            expected_offset += en.count;
            entries.push_back(std::move(en));
        }
    }
    uint64_t expected_bytes = 16 + hlen + static_cast<uint64_t>(expected_offset) * 4;
    if (blob.size() != expected_bytes)
        throw FormatError("checkpoint payload length mismatch: expected " +
                          std::to_string(expected_bytes) + " bytes, file has " +
                          std::to_string(blob.size()));

    const char* payload = blob.data() + 16 + hlen;
    for (const auto& en : entries) {
        Tensor t = Tensor::zeros(en.shape, !en.is_buffer);
        auto& d = t.raw();
        for (int64_t i = 0; i < en.count; ++i) {
            float f;
            std::memcpy(&f, payload + (en.offset + i) * 4, 4);
            d[i] = static_cast<double>(f);
        }
        (en.is_buffer ? ck.params.buffers : ck.params.params)[en.name] = t;
    }

    // the stored tensor set must match the stored architecture
    ModelParams expect =
        init_model(ck.meta.model, 0, ck.meta.ablation != "residual_only");
    auto check_keys = [&](const std::map<std::string, Tensor>& got,
                          const std::map<std::string, Tensor>& want, const char* kind) {
        if (got.size() != want.size())
            throw CheckpointMismatchError(std::string(kind) + " count " +
                                          std::to_string(got.size()) + " does not match config (" +
                                          std::to_string(want.size()) + ")");
        for (const auto& [k, v] : want) {
            auto it = got.find(k);
            if (it == got.end())
                throw CheckpointMismatchError(std::string(kind) + " '" + k + "' missing");
            if (it->second.shape() != v.shape())
                throw CheckpointMismatchError(std::string(kind) + " '" + k + "' shape " +
                                              shape_str(it->second.shape()) + " != " +
                                              shape_str(v.shape()));
        }
    };
    check_keys(ck.params.params, expect.params, "parameter");
    check_keys(ck.params.buffers, expect.buffers, "buffer");
    return ck;
}

}  // namespace dhformer
