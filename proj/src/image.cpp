#include "anom/image.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <vector>

#include "anom/serialize.hpp"

namespace anom {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

float clamp01(float v) { return v < 0.f ? 0.f : (v > 1.f ? 1.f : v); }

}  // namespace

TensorF load_png(const std::filesystem::path& path) {
    FilePtr fp(std::fopen(path.string().c_str(), "rb"));
    if (!fp) throw IoError("cannot open " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("png decode failed: " + path.string());
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    int color = png_get_color_type(png, info);
    int depth = png_get_bit_depth(png, info);

    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    color = png_get_color_type(png, info);
    int channels = (color == PNG_COLOR_TYPE_GRAY) ? 1 : 3;
    std::vector<unsigned char> buf(static_cast<size_t>(h) * w * channels);
    std::vector<png_bytep> rows(h);
    for (png_uint_32 y = 0; y < h; ++y) rows[y] = buf.data() + static_cast<size_t>(y) * w * channels;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);

    TensorF img = TensorF::zeros({channels, static_cast<int>(h), static_cast<int>(w)});
    auto& d = img.mutable_data();
    for (png_uint_32 y = 0; y < h; ++y)
        for (png_uint_32 x = 0; x < w; ++x)
            for (int c = 0; c < channels; ++c)
                d[(static_cast<size_t>(c) * h + y) * w + x] =
                    buf[(static_cast<size_t>(y) * w + x) * channels + c] / 255.0f;
    return img;
}

void save_png(const std::filesystem::path& path, const TensorF& img) {
    if (img.shape().size() != 3 || (img.shape()[0] != 1 && img.shape()[0] != 3))
        throw ShapeError("save_png expects (1|3,H,W), got " + shape_str(img.shape()));
    int channels = img.shape()[0], h = img.shape()[1], w = img.shape()[2];

    FilePtr fp(std::fopen(path.string().c_str(), "wb"));
    if (!fp) throw IoError("cannot open " + path.string() + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("png encode failed: " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, w, h, 8,
                 channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<unsigned char> row(static_cast<size_t>(w) * channels);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < channels; ++c)
                row[static_cast<size_t>(x) * channels + c] = static_cast<unsigned char>(
                    clamp01(img[(static_cast<size_t>(c) * h + y) * w + x]) * 255.0f + 0.5f);
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

TensorF to_gray(const TensorF& img) {
    if (img.shape()[0] == 1) return img.clone_detached();
    int h = img.shape()[1], w = img.shape()[2];
    TensorF g = TensorF::zeros({1, h, w});
    size_t hw = static_cast<size_t>(h) * w;
    auto& d = g.mutable_data();
    for (size_t i = 0; i < hw; ++i)
        d[i] = 0.299f * img[i] + 0.587f * img[hw + i] + 0.114f * img[2 * hw + i];
    return g;
}

void save_pgm16(const std::filesystem::path& path, const TensorF& map) {
    if (map.shape().size() != 3 || map.shape()[0] != 1)
        throw ShapeError("save_pgm16 expects (1,H,W)");
    int h = map.shape()[1], w = map.shape()[2];
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os << "P5\n" << w << " " << h << "\n65535\n";
    for (size_t i = 0; i < map.numel(); ++i) {
        unsigned v = static_cast<unsigned>(clamp01(map[i]) * 65535.0f + 0.5f);
        os.put(static_cast<char>((v >> 8) & 0xff));  // big-endian per PGM spec
        os.put(static_cast<char>(v & 0xff));
    }
}

TensorF load_pgm16(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    is >> magic >> w >> h >> maxval;
    if (magic != "P5" || maxval != 65535) throw IoError("unsupported pgm: " + path.string());
    is.get();  // single whitespace after header
    TensorF map = TensorF::zeros({1, h, w});
    auto& d = map.mutable_data();
    for (size_t i = 0; i < d.size(); ++i) {
        int hi = is.get(), lo = is.get();
        if (hi < 0 || lo < 0) throw IoError("truncated pgm: " + path.string());
        d[i] = static_cast<float>((hi << 8) | lo) / 65535.0f;
    }
    return map;
}

void save_heat_overlay(const std::filesystem::path& path, const TensorF& img, const TensorF& score) {
    TensorF gray = to_gray(img);
    int h = gray.shape()[1], w = gray.shape()[2];
    if (score.shape()[1] != h || score.shape()[2] != w)
        throw ShapeError("overlay: score map resolution mismatch");
    TensorF out = TensorF::zeros({3, h, w});
    size_t hw = static_cast<size_t>(h) * w;
    auto& d = out.mutable_data();
    for (size_t i = 0; i < hw; ++i) {
        float base = 0.5f * gray[i];
        float s = clamp01(score[i]);
        d[i] = clamp01(base + s);            // red carries the score
        d[hw + i] = base;
        d[2 * hw + i] = clamp01(base + 0.25f * (1.0f - s));
    }
    save_png(path, out);
}

}  // namespace anom
