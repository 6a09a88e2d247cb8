// RQQT quantized artifact: little-endian, codes bit-packed LSB-first.
//
//   "RQQT" u32 version=1
//   spec: u32 dim count, u32 dims..., u8 nonlinearity, u8 loss
//   u8 mode, u8 bits, u32 group size, u32 codebook size, u8 integer range,
//   f32 r_o, f32 r_s, f32 t, f32 beta, u64 seed, u32 kmeans iters, f32 act exponent
//   u32 layer count, then per layer:
//     name (u16 len + bytes), u32 rows, u32 cols, u8 has_bias
//     u32 packed byte count, packed codes
//     u32 scale/codebook count, f32 values
//     u32 channel scale count, f32 values
//     outliers:    u32 count, (u16 row, u16 col, f32 value)...
//     significant: u32 count, (u16 row, u16 col, f32 value)...
//   Bias entries use col == cols.

#include "requant/binary_io.hpp"
#include "requant/errors.hpp"
#include "requant/quantizers.hpp"

#include <algorithm>

namespace requant {

namespace {

constexpr std::uint32_t kArtifactVersion = 1;

void write_overlay_block(ByteWriter& out, const SparseTriplets& overlay, std::uint32_t layer) {
    auto lo = std::lower_bound(overlay.begin(), overlay.end(), layer,
                               [](const SparseTriplet& t, std::uint32_t l) { return t.coord.layer < l; });
    auto hi = std::lower_bound(lo, overlay.end(), layer + 1,
                               [](const SparseTriplet& t, std::uint32_t l) { return t.coord.layer < l; });
    out.u32(static_cast<std::uint32_t>(hi - lo));
    for (auto it = lo; it != hi; ++it) {
        out.u16(static_cast<std::uint16_t>(it->coord.row));
        out.u16(static_cast<std::uint16_t>(it->coord.col));
        out.f32(it->value);
    }
}

void read_overlay_block(ByteReader& in, SparseTriplets& overlay, std::uint32_t layer) {
    const std::uint32_t count = in.u32();
    if (static_cast<std::size_t>(count) * 8 > in.remaining()) {
        throw FormatError("artifact: truncated overlay block");
    }
    for (std::uint32_t i = 0; i < count; ++i) {
        SparseTriplet t;
        t.coord.layer = layer;
        t.coord.row = in.u16();
        t.coord.col = in.u16();
        t.value = in.f32();
        overlay.push_back(t);
    }
}

std::vector<float> read_floats(ByteReader& in, std::size_t limit) {
    const std::uint32_t n = in.u32();
    if (n > limit || static_cast<std::size_t>(n) * 4 > in.remaining()) {
        throw FormatError("artifact: implausible float block length");
    }
    std::vector<float> out(n);
    for (auto& v : out) {
        v = in.f32();
    }
    return out;
}

}  // namespace

std::vector<std::uint8_t> encode_artifact(const QuantizedModel& qm) {
    qm.validate();
    for (const auto& layer : qm.layers) {
        if (layer.segment.rows > 0xFFFF || layer.segment.cols + 1 > 0xFFFF) {
            throw FormatError("artifact: layer '" + layer.segment.name + "' exceeds u16 overlay indices");
        }
    }
    const auto& spec = qm.spec;
    const auto& cfg = qm.config;
    ByteWriter out;
    out.magic("RQQT");
    out.u32(kArtifactVersion);
    out.u32(static_cast<std::uint32_t>(spec.hidden.size() + 2));
    out.u32(static_cast<std::uint32_t>(spec.input_dim));
    for (auto h : spec.hidden) {
        out.u32(static_cast<std::uint32_t>(h));
    }
    out.u32(static_cast<std::uint32_t>(spec.classes));
    out.u8(static_cast<std::uint8_t>(spec.activation));
    out.u8(static_cast<std::uint8_t>(spec.loss));

    out.u8(static_cast<std::uint8_t>(cfg.mode));
    out.u8(static_cast<std::uint8_t>(cfg.bits));
    out.u32(static_cast<std::uint32_t>(cfg.group_size));
    out.u32(static_cast<std::uint32_t>(cfg.codebook_size()));
    out.u8(static_cast<std::uint8_t>(cfg.int_range));
    out.f32(static_cast<float>(qm.meta.r_o));
    out.f32(static_cast<float>(qm.meta.r_s));
    out.f32(static_cast<float>(qm.meta.t));
    out.f32(static_cast<float>(qm.meta.beta));
    out.u64(qm.meta.seed);
    out.u32(static_cast<std::uint32_t>(cfg.kmeans_iters));
    out.f32(static_cast<float>(cfg.act_exponent));

    out.u32(static_cast<std::uint32_t>(qm.layers.size()));
    for (std::uint32_t l = 0; l < qm.layers.size(); ++l) {
        const auto& layer = qm.layers[l];
        out.short_string(layer.segment.name);
        out.u32(static_cast<std::uint32_t>(layer.segment.rows));
        out.u32(static_cast<std::uint32_t>(layer.segment.cols));
        out.u8(layer.segment.has_bias ? 1 : 0);
        const auto packed = pack_codes(layer.codes, cfg.code_bits());
        out.u32(static_cast<std::uint32_t>(packed.size()));
        out.bytes(packed);
        const auto& table = cfg.mode == QuantMode::uniform_group ? layer.scales : layer.codebook;
        out.u32(static_cast<std::uint32_t>(table.size()));
        for (float v : table) {
            out.f32(v);
        }
        out.u32(static_cast<std::uint32_t>(layer.channel_scales.size()));
        for (float v : layer.channel_scales) {
            out.f32(v);
        }
        write_overlay_block(out, qm.outliers, l);
        write_overlay_block(out, qm.significant, l);
    }
    return out.data();
}

QuantizedModel decode_artifact(std::vector<std::uint8_t> bytes) {
    ByteReader in(std::move(bytes), "artifact");
    in.expect_magic("RQQT");
    if (const auto version = in.u32(); version != kArtifactVersion) {
        throw FormatError("artifact: unsupported version " + std::to_string(version));
    }
    QuantizedModel qm;
    const std::uint32_t dim_count = in.u32();
    if (dim_count < 3 || dim_count > 4096) {
        throw FormatError("artifact: implausible dimension count");
    }
    qm.spec.input_dim = in.u32();
    qm.spec.hidden.clear();
    for (std::uint32_t i = 0; i + 2 < dim_count; ++i) {
        qm.spec.hidden.push_back(in.u32());
    }
    qm.spec.classes = in.u32();
    const auto act = in.u8();
    const auto loss = in.u8();
    if (act > 1 || loss != 0) {
        throw FormatError("artifact: unknown nonlinearity or loss code");
    }
    qm.spec.activation = static_cast<Activation>(act);
    qm.spec.loss = static_cast<LossKind>(loss);

    auto& cfg = qm.config;
    const auto mode = in.u8();
    if (mode > 1) {
        throw FormatError("artifact: unknown quantizer mode");
    }
    cfg.mode = static_cast<QuantMode>(mode);
    cfg.bits = in.u8();
    cfg.group_size = in.u32();
    const std::uint32_t k = in.u32();
    const auto range = in.u8();
    if (range > 1) {
        throw FormatError("artifact: unknown integer range mode");
    }
    cfg.int_range = static_cast<IntRange>(range);
    qm.meta.r_o = in.f32();
    qm.meta.r_s = in.f32();
    qm.meta.t = in.f32();
    qm.meta.beta = in.f32();
    qm.meta.seed = in.u64();
    cfg.seed = qm.meta.seed;
    cfg.kmeans_iters = in.u32();
    cfg.act_exponent = in.f32();
    try {
        qm.spec.validate();
        cfg.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("artifact: ") + e.what());
    }
    if (k != cfg.codebook_size()) {
        throw FormatError("artifact: codebook size does not match bit width");
    }

    const std::uint32_t layer_count = in.u32();
    if (layer_count != qm.spec.layer_count()) {
        throw FormatError("artifact: layer count does not match the stored spec");
    }
    std::size_t offset = 0;
    for (std::uint32_t l = 0; l < layer_count; ++l) {
        QuantizedLayer layer;
        auto& seg = layer.segment;
        seg.name = in.short_string();
        seg.rows = in.u32();
        seg.cols = in.u32();
        seg.has_bias = in.u8() != 0;
        seg.offset = offset;
        if (seg.rows != qm.spec.layer_out(l) || seg.cols != qm.spec.layer_in(l)) {
            throw FormatError("artifact: layer '" + seg.name + "' shape does not match the stored spec");
        }
        offset += seg.size();
        const std::uint32_t packed_len = in.u32();
        const std::size_t expected = (seg.size() * static_cast<std::size_t>(cfg.code_bits()) + 7) / 8;
        if (packed_len != expected) {
            throw FormatError("artifact: packed code length mismatch in layer '" + seg.name + "'");
        }
        const auto packed = in.bytes(packed_len);
        layer.codes = unpack_codes(packed, seg.size(), cfg.code_bits(), cfg.mode == QuantMode::uniform_group);
        auto table = read_floats(in, seg.size() + cfg.codebook_size());
        if (cfg.mode == QuantMode::uniform_group) {
            layer.scales = std::move(table);
        } else {
            layer.codebook = std::move(table);
        }
        layer.channel_scales = read_floats(in, seg.cols);
        read_overlay_block(in, qm.outliers, l);
        read_overlay_block(in, qm.significant, l);
        qm.layers.push_back(std::move(layer));
    }
    if (!in.at_end()) {
        throw FormatError("artifact: trailing bytes");
    }
    qm.validate();
    return qm;
}

void save_artifact(const std::filesystem::path& path, const QuantizedModel& qm) {
    write_file(path, encode_artifact(qm));
}

QuantizedModel load_artifact(const std::filesystem::path& path) { return decode_artifact(read_file(path)); }

}  // namespace requant
