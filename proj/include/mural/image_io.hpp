// Copyright (C) 2026 The mural-restore Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "mural/core/error.hpp"
#include "mural/image.hpp"

namespace mural {

enum class ImageFormat { png, pgm, ppm };

inline ImageFormat format_from_path(const std::filesystem::path& path) {
    std::string ext = path.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png") return ImageFormat::png;
    if (ext == ".pgm") return ImageFormat::pgm;
    if (ext == ".ppm") return ImageFormat::ppm;
    throw FormatError("unsupported image format '" + ext + "' for " + path.string());
}

inline bool is_image_path(const std::filesystem::path& path) {
    try {
        format_from_path(path);
        return true;
    } catch (const FormatError&) {
        return false;
    }
}

namespace detail {

inline double from_u8(unsigned v) { return v / 255.0; }
inline double from_u16(unsigned v) { return v / 65535.0; }
inline unsigned to_u8(double v) { return static_cast<unsigned>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }
inline unsigned to_u16(double v) { return static_cast<unsigned>(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0)); }

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct PngIo {
    png_structp png = nullptr;
    png_infop info = nullptr;
    std::FILE* fp = nullptr;
    std::vector<unsigned char> bytes;
    std::vector<png_bytep> rows;
    png_uint_32 width = 0, height = 0;
    int channels = 0, bit_depth = 0;
    std::string message;
};

inline void png_error_handler(png_structp png, png_const_charp msg) {
    auto* io = static_cast<PngIo*>(png_get_error_ptr(png));
    io->message = msg ? msg : "libpng error";
    png_longjmp(png, 1);
}

inline void png_warning_handler(png_structp, png_const_charp) {}

// libpng reports errors with longjmp; everything mutable lives in `io` so no
// local of this frame is relied upon after a jump.
inline bool png_read_into(PngIo& io) {
    io.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &io, png_error_handler, png_warning_handler);
    if (!io.png) {
        io.message = "cannot allocate png reader";
        return false;
    }
    io.info = png_create_info_struct(io.png);
    if (!io.info) {
        io.message = "cannot allocate png info";
        return false;
    }
    if (setjmp(png_jmpbuf(io.png))) return false;
    png_init_io(io.png, io.fp);
    png_set_sig_bytes(io.png, 8);
    png_read_info(io.png, io.info);
    io.width = png_get_image_width(io.png, io.info);
    io.height = png_get_image_height(io.png, io.info);
    const int color = png_get_color_type(io.png, io.info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(io.png);
    if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(io.png, io.info) < 8) png_set_expand_gray_1_2_4_to_8(io.png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(io.png);
    if (png_get_valid(io.png, io.info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(io.png), png_set_strip_alpha(io.png);
    if (png_get_bit_depth(io.png, io.info) == 16) png_set_swap(io.png);  // native little-endian rows
    png_read_update_info(io.png, io.info);
    io.channels = png_get_channels(io.png, io.info);
    io.bit_depth = png_get_bit_depth(io.png, io.info);
    const std::size_t rowbytes = png_get_rowbytes(io.png, io.info);
    io.bytes.assign(rowbytes * io.height, 0);
    io.rows.assign(io.height, nullptr);
    for (png_uint_32 y = 0; y < io.height; ++y) io.rows[y] = io.bytes.data() + y * rowbytes;
    png_read_image(io.png, io.rows.data());
    png_read_end(io.png, nullptr);
    return true;
}

inline Image read_png(const std::filesystem::path& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open " + path.string());
    unsigned char sig[8] = {};
    if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
        throw FormatError("not a PNG file: " + path.string());
    PngIo io;
    io.fp = fp.get();
    const bool ok = png_read_into(io);
    png_destroy_read_struct(io.png ? &io.png : nullptr, io.info ? &io.info : nullptr, nullptr);
    if (!ok) {
        const std::string m = io.message;
        if (m.find("Read Error") != std::string::npos || m.find("EOF") != std::string::npos ||
            m.find("truncat") != std::string::npos || m.find("Not enough") != std::string::npos)
            throw FormatError("truncated PNG file " + path.string() + ": " + m);
        throw FormatError("invalid PNG file " + path.string() + ": " + m);
    }
    if (io.channels != 1 && io.channels != 3)
        throw FormatError("unsupported PNG channel layout in " + path.string());
    const std::size_t n = static_cast<std::size_t>(io.width) * io.height * io.channels;
    std::vector<double> data(n);
    if (io.bit_depth == 16) {
        for (std::size_t i = 0; i < n; ++i)
            data[i] = from_u16(static_cast<unsigned>(io.bytes[2 * i]) | (static_cast<unsigned>(io.bytes[2 * i + 1]) << 8));
    } else {
        for (std::size_t i = 0; i < n; ++i) data[i] = from_u8(io.bytes[i]);
    }
    return Image(static_cast<int>(io.height), static_cast<int>(io.width), io.channels, std::move(data));
}

struct PngWriteIo {
    png_structp png = nullptr;
    png_infop info = nullptr;
    std::FILE* fp = nullptr;
    std::string message;
};

inline bool png_write_from(PngWriteIo& io, const std::vector<unsigned char>& bytes, int width, int height,
                           int channels, int bit_depth) {
    io.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &io, png_error_handler, png_warning_handler);
    if (!io.png) return false;
    io.info = png_create_info_struct(io.png);
    if (!io.info) return false;
    if (setjmp(png_jmpbuf(io.png))) return false;
    png_init_io(io.png, io.fp);
    png_set_IHDR(io.png, io.info, width, height, bit_depth, channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(io.png, io.info);
    if (bit_depth == 16) png_set_swap(io.png);
    const std::size_t rowbytes = static_cast<std::size_t>(width) * channels * (bit_depth / 8);
    for (int y = 0; y < height; ++y)
        png_write_row(io.png, const_cast<png_bytep>(bytes.data() + static_cast<std::size_t>(y) * rowbytes));
    png_write_end(io.png, nullptr);
    return true;
}

inline void write_png(const Image& img, const std::filesystem::path& path, int bit_depth) {
    if (img.channels() != 1 && img.channels() != 3)
        throw FormatError("PNG output supports 1 or 3 channels, got " + std::to_string(img.channels()));
    if (bit_depth != 8 && bit_depth != 16) throw FormatError("PNG bit depth must be 8 or 16");
    std::vector<unsigned char> bytes;
    auto src = img.data();
    if (bit_depth == 8) {
        bytes.resize(src.size());
        for (std::size_t i = 0; i < src.size(); ++i) bytes[i] = static_cast<unsigned char>(to_u8(src[i]));
    } else {
        bytes.resize(src.size() * 2);
        for (std::size_t i = 0; i < src.size(); ++i) {
            const unsigned v = to_u16(src[i]);
            bytes[2 * i] = static_cast<unsigned char>(v & 0xff);
            bytes[2 * i + 1] = static_cast<unsigned char>(v >> 8);
        }
    }
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot open " + path.string() + " for writing");
    PngWriteIo io;
    io.fp = fp.get();
    const bool ok = png_write_from(io, bytes, img.width(), img.height(), img.channels(), bit_depth);
    png_destroy_write_struct(io.png ? &io.png : nullptr, io.info ? &io.info : nullptr);
    if (!ok) throw IoError("failed writing PNG " + path.string() + ": " + io.message);
}

inline void skip_pnm_space(std::istream& in) {
    while (true) {
        const int c = in.peek();
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (c != EOF && std::isspace(c)) {
            in.get();
        } else {
            return;
        }
    }
}

inline long read_pnm_int(std::istream& in, const std::string& path) {
    skip_pnm_space(in);
    long v = -1;
    if (!(in >> v)) throw FormatError("malformed PNM header in " + path);
    return v;
}

inline Image read_pnm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    char magic[2] = {};
    in.read(magic, 2);
    if (!in || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6'))
        throw FormatError("not a binary PGM/PPM file: " + path.string());
    const int channels = magic[1] == '5' ? 1 : 3;
    const long width = read_pnm_int(in, path.string());
    const long height = read_pnm_int(in, path.string());
    const long maxval = read_pnm_int(in, path.string());
    if (width < 1 || height < 1 || width > (1L << 20) || height > (1L << 20))
        throw FormatError("invalid dimensions in PNM header of " + path.string());
    if (maxval < 1 || maxval > 65535) throw FormatError("invalid maxval in PNM header of " + path.string());
    in.get();  // single whitespace before the raster
    const int bytes_per = maxval > 255 ? 2 : 1;
    const std::size_t n = static_cast<std::size_t>(width) * height * channels;
    std::vector<unsigned char> raw(n * bytes_per);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size())
        throw FormatError("truncated PNM file " + path.string() + ": expected " + std::to_string(raw.size()) +
                          " payload bytes, got " + std::to_string(in.gcount()));
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) {
        const unsigned v = bytes_per == 1 ? raw[i] : (static_cast<unsigned>(raw[2 * i]) << 8) | raw[2 * i + 1];
        data[i] = std::min(1.0, static_cast<double>(v) / maxval);
    }
    return Image(static_cast<int>(height), static_cast<int>(width), channels, std::move(data));
}

inline void write_pnm(const Image& img, const std::filesystem::path& path, ImageFormat fmt) {
    const int want = fmt == ImageFormat::pgm ? 1 : 3;
    if (img.channels() != want)
        throw FormatError(std::string(fmt == ImageFormat::pgm ? "PGM" : "PPM") + " output needs " +
                          std::to_string(want) + " channel(s), got " + std::to_string(img.channels()));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << (want == 1 ? "P5" : "P6") << '\n' << img.width() << ' ' << img.height() << "\n255\n";
    std::vector<char> raw(img.size());
    auto src = img.data();
    for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = static_cast<char>(to_u8(src[i]));
    out.write(raw.data(), static_cast<std::streamsize>(raw.size()));
    if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace detail

// 8-bit value v maps to v/255 and 16-bit v to v/65535.
inline Image read_image(const std::filesystem::path& path) {
    switch (format_from_path(path)) {
        case ImageFormat::png:
            return detail::read_png(path);
        case ImageFormat::pgm:
        case ImageFormat::ppm:
            return detail::read_pnm(path);
    }
    throw FormatError("unsupported format");
}

// PNG may be written at 8 or 16 bits; PGM/PPM are always 8-bit.
inline void write_image(const Image& img, const std::filesystem::path& path, int bit_depth = 8) {
    const ImageFormat fmt = format_from_path(path);
    if (fmt == ImageFormat::png) return detail::write_png(img, path, bit_depth);
    if (bit_depth != 8) throw FormatError("PGM/PPM output is 8-bit only");
    detail::write_pnm(img, path, fmt);
}

}  // namespace mural
