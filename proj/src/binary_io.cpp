#include "requant/binary_io.hpp"

#include "requant/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace requant {

void ByteWriter::u16(std::uint16_t v) {
    u8(static_cast<std::uint8_t>(v));
    u8(static_cast<std::uint8_t>(v >> 8));
}

void ByteWriter::u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

void ByteWriter::u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

void ByteWriter::magic(std::string_view tag) {
    for (char c : tag) {
        u8(static_cast<std::uint8_t>(c));
    }
}

void ByteWriter::short_string(const std::string& s) {
    if (s.size() > 0xFFFF) {
        throw FormatError("string too long for u16 length prefix");
    }
    u16(static_cast<std::uint16_t>(s.size()));
    for (char c : s) {
        u8(static_cast<std::uint8_t>(c));
    }
}

const std::uint8_t* ByteReader::take(std::size_t n) {
    if (n > remaining()) {
        throw FormatError(what_ + ": truncated at byte " + std::to_string(pos_));
    }
    const std::uint8_t* p = data_.data() + pos_;
    pos_ += n;
    return p;
}

std::uint8_t ByteReader::u8() { return *take(1); }

std::uint16_t ByteReader::u16() {
    const auto* p = take(2);
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

std::uint32_t ByteReader::u32() {
    const auto* p = take(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) {
        v = (v << 8) | p[i];
    }
    return v;
}

std::uint64_t ByteReader::u64() {
    const auto* p = take(8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) {
        v = (v << 8) | p[i];
    }
    return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }

void ByteReader::expect_magic(std::string_view tag) {
    const auto* p = take(tag.size());
    if (std::memcmp(p, tag.data(), tag.size()) != 0) {
        throw FormatError(what_ + ": bad magic, expected \"" + std::string(tag) + "\"");
    }
}

std::string ByteReader::short_string() {
    const std::size_t n = u16();
    const auto* p = take(n);
    return std::string(reinterpret_cast<const char*>(p), n);
}

std::vector<std::uint8_t> ByteReader::bytes(std::size_t n) {
    const auto* p = take(n);
    return std::vector<std::uint8_t>(p, p + n);
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open " + path.string());
    }
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw FormatError("cannot write " + path.string());
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw FormatError("short write to " + path.string());
    }
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw FormatError("cannot write " + path.string());
    }
    out << text;
}

}  // namespace requant
