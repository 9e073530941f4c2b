#pragma once

// Checkpoint container: 8-byte magic, 8-byte little-endian header length, a
// JSON header (model config, per-site norm modes with frozen sigmas, tensor
// index), then raw little-endian tensor bytes. Save/load round-trips
// bit-exactly. See docs/formats.md.

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lnfree/common.hpp"
#include "lnfree/model.hpp"
#include "lnfree/norm.hpp"

namespace lnfree {

inline constexpr char kCheckpointMagic[8] = {'L', 'N', 'F', 'C', 'K', 'P', 'T', '1'};

namespace detail {

template <typename T>
const char* dtype_name() {
    if constexpr (sizeof(T) == 4) return "f32";
    else return "f64";
}

inline nlohmann::json mode_to_json(const NormMode& m) {
    nlohmann::json j;
    j["fake"] = m.fake;
    if (m.fake) j["sigma"] = m.frozen_sigma;
    return j;
}

inline NormMode mode_from_json(const nlohmann::json& j) {
    if (j.at("fake").get<bool>()) return NormMode::fake_ln(j.at("sigma").get<double>());
    return NormMode::ln();
}

}  // namespace detail

inline nlohmann::json mode_map_to_json(const NormModeMap& modes) {
    nlohmann::json j;
    for (const char* kind : {"qk", "v", "mlp"}) {
        nlohmann::json arr = nlohmann::json::array();
        for (int l = 0; l < modes.n_layers(); ++l) {
            arr.push_back(detail::mode_to_json(modes.at({site_kind_from_name(kind), l})));
        }
        j[kind] = arr;
    }
    j["final"] = detail::mode_to_json(modes.at(NormSite::final()));
    return j;
}

inline NormModeMap mode_map_from_json(const nlohmann::json& j, int n_layers) {
    NormModeMap modes(n_layers);
    for (const char* kind : {"qk", "v", "mlp"}) {
        const auto& arr = j.at(kind);
        if (static_cast<int>(arr.size()) != n_layers) throw IoError("checkpoint: mode map layer count mismatch");
        for (int l = 0; l < n_layers; ++l) {
            const NormMode m = detail::mode_from_json(arr.at(static_cast<size_t>(l)));
            if (m.fake) modes.set_norm_mode({site_kind_from_name(kind), l}, m.frozen_sigma);
        }
    }
    const NormMode fin = detail::mode_from_json(j.at("final"));
    if (fin.fake) modes.set_norm_mode(NormSite::final(), fin.frozen_sigma);
    return modes;
}

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
    return nlohmann::json{{"n_layers", c.n_layers},       {"d_model", c.d_model},
                          {"n_heads", c.n_heads},         {"d_head", c.d_head},
                          {"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len},
                          {"ln_epsilon", c.ln_epsilon},   {"tie_embeddings", c.tie_embeddings}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_head = j.at("d_head").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.ln_epsilon = j.at("ln_epsilon").get<double>();
    c.tie_embeddings = j.at("tie_embeddings").get<bool>();
    c.validate();
    return c;
}

template <typename T>
void save_checkpoint(const std::string& path, const ModelConfig& cfg, const NormModeMap& modes,
                     const TransformerParams<T>& params) {
    const auto named = params.named_parameters();
    nlohmann::json index = nlohmann::json::array();
    int64_t offset = 0;
    for (const auto& p : named) {
        const int64_t nbytes = p.node->numel() * static_cast<int64_t>(sizeof(T));
        index.push_back({{"name", p.name},
                         {"dtype", detail::dtype_name<T>()},
                         {"shape", p.node->shape()},
                         {"offset", offset},
                         {"nbytes", nbytes}});
        offset += nbytes;
    }
    nlohmann::json header{{"format", "lnfree-checkpoint"},
                          {"version", 1},
                          {"model", model_config_to_json(cfg)},
                          {"mode_map", mode_map_to_json(modes)},
                          {"tensors", index}};
    const std::string header_str = header.dump();

    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    os.write(kCheckpointMagic, 8);
    const uint64_t hlen = header_str.size();
    unsigned char lenbuf[8];
    for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<unsigned char>((hlen >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(lenbuf), 8);
    os.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto& p : named) {
        os.write(reinterpret_cast<const char*>(p.node->value.data.data()),
                 static_cast<std::streamsize>(p.node->numel() * static_cast<int64_t>(sizeof(T))));
    }
    if (!os) throw IoError("write failed: " + path);
}

template <typename T>
struct Checkpoint {
    ModelConfig config;
    NormModeMap modes;
    TransformerParams<T> params;
};

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw IoError("not a checkpoint file: " + path);
    unsigned char lenbuf[8];
    is.read(reinterpret_cast<char*>(lenbuf), 8);
    if (!is) throw IoError("checkpoint truncated: " + path);
    uint64_t hlen = 0;
    for (int i = 0; i < 8; ++i) hlen |= static_cast<uint64_t>(lenbuf[i]) << (8 * i);
    std::string header_str(hlen, '\0');
    is.read(header_str.data(), static_cast<std::streamsize>(hlen));
    if (!is) throw IoError("checkpoint truncated: " + path);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_str);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("checkpoint header is not valid JSON: ") + e.what());
    }

    Checkpoint<T> out{model_config_from_json(header.at("model")),
                      mode_map_from_json(header.at("mode_map"), header.at("model").at("n_layers").get<int>()),
                      TransformerParams<T>::init(model_config_from_json(header.at("model")), 0)};

    std::unordered_map<std::string, NodePtr<T>> by_name;
    for (const auto& p : out.params.named_parameters()) by_name[p.name] = p.node;

    const std::streampos data_start = is.tellg();
    for (const auto& entry : header.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        const std::string dtype = entry.at("dtype").get<std::string>();
        const Shape shape = entry.at("shape").get<Shape>();
        const int64_t offset = entry.at("offset").get<int64_t>();
        auto it = by_name.find(name);
        if (it == by_name.end()) throw IoError("checkpoint tensor has no destination: " + name);
        NodePtr<T>& node = it->second;
        if (node->shape() != shape) throw IoError("checkpoint tensor shape mismatch for " + name);
        is.seekg(data_start + static_cast<std::streamoff>(offset));
        const int64_t n = node->numel();
        if (dtype == "f32") {
            std::vector<float> buf(static_cast<size_t>(n));
            is.read(reinterpret_cast<char*>(buf.data()), n * 4);
            for (int64_t i = 0; i < n; ++i) node->value[i] = static_cast<T>(buf[static_cast<size_t>(i)]);
        } else if (dtype == "f64") {
            std::vector<double> buf(static_cast<size_t>(n));
            is.read(reinterpret_cast<char*>(buf.data()), n * 8);
            for (int64_t i = 0; i < n; ++i) node->value[i] = static_cast<T>(buf[static_cast<size_t>(i)]);
        } else {
            throw IoError("checkpoint tensor has unknown dtype: " + dtype);
        }
        if (!is) throw IoError("checkpoint truncated while reading " + name);
    }
    return out;
}

}  // namespace lnfree
