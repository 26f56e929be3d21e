#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "atmskd/net.hpp"

namespace atmskd {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian; big-endian hosts are unsupported");

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
    int epoch = 0;
    double best_val_accuracy = 0.0;
    std::uint64_t seed = 0;
};

namespace detail {

inline nlohmann::json spec_to_json(const ModelSpec& spec) {
    return nlohmann::json{{"width_multiplier", spec.width_multiplier},
                          {"stem_channels_base", spec.stem_channels_base},
                          {"stage_channels_base", spec.stage_channels_base},
                          {"blocks_per_stage", spec.blocks_per_stage},
                          {"num_classes", spec.num_classes},
                          {"input_size", spec.input_size},
                          {"dropout_rate", spec.dropout_rate}};
}

inline ModelSpec spec_from_json(const nlohmann::json& j) {
    ModelSpec spec;
    spec.width_multiplier = j.at("width_multiplier").get<double>();
    spec.stem_channels_base = j.at("stem_channels_base").get<int>();
    j.at("stage_channels_base").get_to(spec.stage_channels_base);
    j.at("blocks_per_stage").get_to(spec.blocks_per_stage);
    spec.num_classes = j.at("num_classes").get<int>();
    spec.input_size = j.at("input_size").get<int>();
    spec.dropout_rate = j.at("dropout_rate").get<double>();
    return spec;
}

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::istream& is, T& v) {
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
        throw CheckpointError(CheckpointError::Code::truncated, "checkpoint: unexpected end of file");
}

inline void write_named_array(std::ostream& os, const std::string& name, const Shape& shape,
                              const double* values, std::int64_t count) {
    write_pod(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod(os, static_cast<std::uint8_t>(0));  // dtype tag: f32
    write_pod(os, static_cast<std::uint8_t>(shape.size()));
    for (int d : shape) write_pod(os, static_cast<std::uint32_t>(d));
    std::vector<float> payload(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) payload[static_cast<std::size_t>(i)] = static_cast<float>(values[i]);
    os.write(reinterpret_cast<const char*>(payload.data()),
             static_cast<std::streamsize>(payload.size() * sizeof(float)));
}

struct NamedArray {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

inline NamedArray read_named_array(std::istream& is) {
    NamedArray arr;
    std::uint32_t name_len = 0;
    read_pod(is, name_len);
    arr.name.resize(name_len);
    if (!is.read(arr.name.data(), name_len))
        throw CheckpointError(CheckpointError::Code::truncated, "checkpoint: truncated tensor name");
    std::uint8_t dtype = 0, rank = 0;
    read_pod(is, dtype);
    if (dtype != 0)
        throw CheckpointError(CheckpointError::Code::version_mismatch,
                              "checkpoint: unknown dtype tag " + std::to_string(dtype));
    read_pod(is, rank);
    std::int64_t count = 1;
    for (int i = 0; i < rank; ++i) {
        std::uint32_t d = 0;
        read_pod(is, d);
        arr.shape.push_back(static_cast<int>(d));
        count *= d;
    }
    std::vector<float> payload(static_cast<std::size_t>(count));
    if (!is.read(reinterpret_cast<char*>(payload.data()),
                 static_cast<std::streamsize>(payload.size() * sizeof(float))))
        throw CheckpointError(CheckpointError::Code::truncated,
                              "checkpoint: truncated payload for tensor '" + arr.name + "'");
    arr.values.assign(payload.begin(), payload.end());
    return arr;
}

}  // namespace detail

/// File layout: magic "ATMS", u32 format version, length-prefixed JSON header
/// (model spec + training metadata), then named tensors as
/// (name length, name, dtype tag, rank, extents, little-endian f32 payload).
inline void save_checkpoint(Network& net, const CheckpointMeta& meta, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("checkpoint: cannot open '" + path + "' for writing");

    std::uint32_t tensor_count = 0;
    net.visit_parameters([&](const std::string&, Tensor&) { ++tensor_count; });
    net.visit_bn_states([&](const std::string&, BatchNormState&) { tensor_count += 2; });

    bool bn_initialized = true;
    net.visit_bn_states(
        [&](const std::string&, BatchNormState& st) { bn_initialized = bn_initialized && st.initialized; });

    nlohmann::json header{{"model_spec", detail::spec_to_json(net.spec())},
                          {"metadata",
                           {{"epoch", meta.epoch},
                            {"best_val_accuracy", meta.best_val_accuracy},
                            {"seed", meta.seed}}},
                          {"bn_initialized", bn_initialized},
                          {"tensor_count", tensor_count}};
    const std::string header_str = header.dump();

    os.write("ATMS", 4);
    detail::write_pod(os, kCheckpointVersion);
    detail::write_pod(os, static_cast<std::uint32_t>(header_str.size()));
    os.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));

    net.visit_parameters([&](const std::string& name, Tensor& t) {
        detail::write_named_array(os, name, t.shape(), t.ptr(), t.numel());
    });
    net.visit_bn_states([&](const std::string& name, BatchNormState& st) {
        const Shape shape{static_cast<int>(st.running_mean.size())};
        detail::write_named_array(os, name + ".running_mean", shape, st.running_mean.data(),
                                  static_cast<std::int64_t>(st.running_mean.size()));
        detail::write_named_array(os, name + ".running_var", shape, st.running_var.data(),
                                  static_cast<std::int64_t>(st.running_var.size()));
    });
    os.flush();
    if (!os) throw IoError("checkpoint: write to '" + path + "' failed");
}

struct LoadedCheckpoint {
    Network net;
    CheckpointMeta meta;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint: cannot open '" + path + "' for reading");

    char magic[4] = {};
    if (!is.read(magic, 4) || std::memcmp(magic, "ATMS", 4) != 0)
        throw CheckpointError(CheckpointError::Code::bad_magic,
                              "checkpoint: '" + path + "' is not a checkpoint file");
    std::uint32_t version = 0;
    detail::read_pod(is, version);
    if (version != kCheckpointVersion)
        throw CheckpointError(CheckpointError::Code::version_mismatch,
                              "checkpoint: format version " + std::to_string(version) +
                                  " not supported (expected " + std::to_string(kCheckpointVersion) + ")");
    std::uint32_t header_len = 0;
    detail::read_pod(is, header_len);
    std::string header_str(header_len, '\0');
    if (!is.read(header_str.data(), header_len))
        throw CheckpointError(CheckpointError::Code::truncated, "checkpoint: truncated header");

    nlohmann::json header = nlohmann::json::parse(header_str, nullptr, false);
    if (header.is_discarded())
        throw CheckpointError(CheckpointError::Code::truncated, "checkpoint: corrupt JSON header");

    const ModelSpec spec = detail::spec_from_json(header.at("model_spec"));
    CheckpointMeta meta;
    meta.epoch = header.at("metadata").at("epoch").get<int>();
    meta.best_val_accuracy = header.at("metadata").at("best_val_accuracy").get<double>();
    meta.seed = header.at("metadata").at("seed").get<std::uint64_t>();
    const bool bn_initialized = header.at("bn_initialized").get<bool>();
    const auto tensor_count = header.at("tensor_count").get<std::uint32_t>();

    std::vector<detail::NamedArray> arrays;
    arrays.reserve(tensor_count);
    for (std::uint32_t i = 0; i < tensor_count; ++i) arrays.push_back(detail::read_named_array(is));

    LoadedCheckpoint result{Network(spec, 0), meta};
    std::size_t cursor = 0;
    auto take = [&](const std::string& name, const Shape& want) -> detail::NamedArray& {
        if (cursor >= arrays.size())
            throw CheckpointError(CheckpointError::Code::truncated,
                                  "checkpoint: missing tensor '" + name + "'");
        auto& arr = arrays[cursor++];
        if (arr.name != name || arr.shape != want)
            throw CheckpointError(CheckpointError::Code::shape_mismatch,
                                  "checkpoint: expected '" + name + "' " + shape_str(want) + ", found '" +
                                      arr.name + "' " + shape_str(arr.shape));
        return arr;
    };
    result.net.visit_parameters([&](const std::string& name, Tensor& t) {
        t.data() = std::move(take(name, t.shape()).values);
    });
    result.net.visit_bn_states([&](const std::string& name, BatchNormState& st) {
        const Shape shape{static_cast<int>(st.running_mean.size())};
        st.running_mean = std::move(take(name + ".running_mean", shape).values);
        st.running_var = std::move(take(name + ".running_var", shape).values);
        st.initialized = bn_initialized;
    });
    return result;
}

}  // namespace atmskd
