#pragma once

#include <png.h>

#include <cstdio>
#include <csetjmp>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "bbfcn/geometry.hpp"
#include "bbfcn/tensor.hpp"

// Image decoding (PNG, binary PPM/PGM), annotation files, and zero-padded
// cropping. Images are 3 x H x W float tensors in [0,1]; grayscale sources
// are replicated to three channels.

namespace bbfcn {

using Image = Tensor<float>;

struct AnnotatedFace {
    std::string path;  // image path, or synthetic descriptor
    Box box;
    LandmarkSet landmarks;
};

namespace detail {

inline int pnm_token(std::istream& in) {
    // skips whitespace and '#' comments
    for (;;) {
        int c = in.get();
        if (c == '#') {
            while (c != '\n' && c != EOF) c = in.get();
        } else if (!std::isspace(c)) {
            if (c == EOF) throw FormatError("truncated PNM header");
            in.unget();
            int v;
            if (!(in >> v) || v < 0) throw FormatError("invalid PNM header token");
            return v;
        }
    }
}

inline Image decode_pnm(std::istream& in, bool color) {
    const int w = pnm_token(in);
    const int h = pnm_token(in);
    const int maxval = pnm_token(in);
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
        throw FormatError("unsupported PNM dimensions or maxval");
    in.get();  // single whitespace after maxval
    const int channels = color ? 3 : 1;
    std::vector<char> raw(static_cast<size_t>(w) * h * channels);
    in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size()))
        throw FormatError("truncated PNM payload");

    Image img({3, h, w});
    const float fmax = static_cast<float>(maxval);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const size_t base = (static_cast<size_t>(y) * w + x) * channels;
            for (int c = 0; c < 3; ++c) {
                const auto byte = static_cast<unsigned char>(raw[base + (color ? c : 0)]);
                img.at(c, y, x) = static_cast<float>(byte) / fmax;
            }
        }
    }
    return img;
}

inline Image decode_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw DataError("cannot open image: " + path);
    png_byte header[8];
    if (std::fread(header, 1, 8, fp) != 8 || png_sig_cmp(header, 0, 8) != 0) {
        std::fclose(fp);
        throw FormatError("not a PNG file: " + path);
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw FormatError("libpng initialization failed");
    }
    std::vector<png_bytep> rows;
    std::vector<png_byte> pixels;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw FormatError("corrupt PNG file: " + path);
    }
    png_init_io(png, fp);
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    png_set_expand(png);         // palette/gray<8/trns to full depth
    png_set_strip_16(png);       // 16-bit to 8-bit
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);

    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    pixels.resize(static_cast<size_t>(w) * h * 3);
    rows.resize(static_cast<size_t>(h));
    for (int y = 0; y < h; ++y) rows[static_cast<size_t>(y)] = pixels.data() + static_cast<size_t>(y) * w * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);

    Image img({3, h, w});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                img.at(c, y, x) =
                    static_cast<float>(pixels[(static_cast<size_t>(y) * w + x) * 3 + c]) / 255.0f;
    return img;
}

}  // namespace detail

/// Decodes PNG, PPM (P6) or PGM (P5) by content.
inline Image decode_image(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open image: " + path);
    char m0 = 0, m1 = 0;
    in.get(m0);
    in.get(m1);
    if (m0 == 'P' && m1 == '6') return detail::decode_pnm(in, true);
    if (m0 == 'P' && m1 == '5') return detail::decode_pnm(in, false);
    in.close();
    if (static_cast<unsigned char>(m0) == 0x89 && m1 == 'P') return detail::decode_png(path);
    throw FormatError("unsupported image container: " + path);
}

inline void write_ppm(const std::string& path, const Image& img) {
    require(img.rank() == 3 && img.dim(0) == 3, "write_ppm: image must be 3 x H x W");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open for writing: " + path);
    const int h = img.dim(1), w = img.dim(2);
    out << "P6\n" << w << " " << h << "\n255\n";
    std::vector<char> raw(static_cast<size_t>(w) * h * 3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                float v = img.at(c, y, x);
                v = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
                raw[(static_cast<size_t>(y) * w + x) * 3 + c] =
                    static_cast<char>(static_cast<int>(v * 255.0f + 0.5f));
            }
    out.write(raw.data(), static_cast<std::streamsize>(raw.size()));
}

/// Grayscale dump of one heat-map channel: clamp to [0,1], scale by 255.
template <typename T>
void write_pgm_channel(const std::string& path, const Tensor<T>& map, int channel) {
    require(map.rank() == 3 && channel >= 0 && channel < map.dim(0), "write_pgm: bad channel");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open for writing: " + path);
    const int h = map.dim(1), w = map.dim(2);
    out << "P5\n" << w << " " << h << "\n255\n";
    std::vector<char> raw(static_cast<size_t>(w) * h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double v = static_cast<double>(map.at(channel, y, x));
            v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
            raw[static_cast<size_t>(y) * w + x] = static_cast<char>(static_cast<int>(v * 255.0 + 0.5));
        }
    out.write(raw.data(), static_cast<std::streamsize>(raw.size()));
}

/// Annotation file: header line "#K=<int>", then one face per line:
///   <path> <box_x> <box_y> <box_w> <box_h> <x1> <y1> ... <xK> <yK>
/// with (-1,-1) marking an invisible landmark.
inline std::vector<AnnotatedFace> parse_annotations(std::istream& in, int* k_out = nullptr) {
    std::string line;
    int k_types = -1;
    std::vector<AnnotatedFace> faces;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        if (line[0] == '#') {
            if (line.rfind("#K=", 0) == 0) {
                try {
                    k_types = std::stoi(line.substr(3));
                } catch (...) {
                    throw FormatError("annotation line " + std::to_string(line_no) +
                                      ": invalid K header");
                }
            }
            continue;
        }
        if (k_types <= 0)
            throw FormatError("annotation file is missing the #K=<int> header");
        std::istringstream ls(line);
        AnnotatedFace face;
        if (!(ls >> face.path))
            throw FormatError("annotation line " + std::to_string(line_no) + ": missing path");
        std::vector<double> nums;
        std::string tok;
        while (ls >> tok) {
            try {
                size_t used = 0;
                nums.push_back(std::stod(tok, &used));
                if (used != tok.size()) throw std::invalid_argument(tok);
            } catch (...) {
                throw FormatError("annotation line " + std::to_string(line_no) +
                                  ": non-numeric token '" + tok + "'");
            }
        }
        const size_t expect = 4 + 2 * static_cast<size_t>(k_types);
        if (nums.size() != expect)
            throw FormatError("annotation line " + std::to_string(line_no) + ": expected " +
                              std::to_string(expect) + " numeric fields, got " +
                              std::to_string(nums.size()));
        face.box = {nums[0], nums[1], nums[2], nums[3]};
        for (int k = 0; k < k_types; ++k) {
            const double x = nums[4 + 2 * static_cast<size_t>(k)];
            const double y = nums[5 + 2 * static_cast<size_t>(k)];
            const bool vis = !(x == -1.0 && y == -1.0);
            face.landmarks.push_back({x, y, vis});
        }
        faces.push_back(std::move(face));
    }
    if (k_out) *k_out = k_types;
    return faces;
}

inline std::vector<AnnotatedFace> parse_annotations_file(const std::string& path,
                                                         int* k_out = nullptr) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open annotation file: " + path);
    return parse_annotations(in, k_out);
}

inline void write_annotations(std::ostream& out, const std::vector<AnnotatedFace>& faces,
                              int k_types) {
    out << "#K=" << k_types << "\n";
    for (const auto& f : faces) {
        out << f.path << " " << f.box.x << " " << f.box.y << " " << f.box.w << " " << f.box.h;
        for (const auto& lm : f.landmarks) {
            if (lm.visible)
                out << " " << lm.x << " " << lm.y;
            else
                out << " -1 -1";
        }
        out << "\n";
    }
}

/// side x side patch centered at integer (cx, cy); pixels outside the source
/// are zero. patch(u,v) = source(cx - side/2 + u, cy - side/2 + v).
template <typename T>
Tensor<T> crop_with_zero_pad(const Tensor<T>& source, int cx, int cy, int side) {
    require(side >= 1, "crop: side must be >= 1");
    require(source.rank() == 3, "crop: source must be C x H x W");
    const int C = source.dim(0), H = source.dim(1), W = source.dim(2);
    const int ox = cx - side / 2, oy = cy - side / 2;
    Tensor<T> patch({C, side, side});
    const int v0 = std::max(0, -oy), v1 = std::min(side, H - oy);
    const int u0 = std::max(0, -ox), u1 = std::min(side, W - ox);
    for (int c = 0; c < C; ++c)
        for (int v = v0; v < v1; ++v) {
            const T* src = source.row(c, oy + v);
            T* dst = patch.row(c, v);
            for (int u = u0; u < u1; ++u) dst[u] = src[ox + u];
        }
    return patch;
}

/// Rectangular zero-padded crop (used for training-sample extraction).
template <typename T>
Tensor<T> crop_rect_zero_pad(const Tensor<T>& source, int x0, int y0, int w, int h) {
    require(w >= 1 && h >= 1, "crop: degenerate rect");
    const int C = source.dim(0), H = source.dim(1), W = source.dim(2);
    Tensor<T> patch({C, h, w});
    const int v0 = std::max(0, -y0), v1 = std::min(h, H - y0);
    const int u0 = std::max(0, -x0), u1 = std::min(w, W - x0);
    for (int c = 0; c < C; ++c)
        for (int v = v0; v < v1; ++v) {
            const T* src = source.row(c, y0 + v);
            T* dst = patch.row(c, v);
            for (int u = u0; u < u1; ++u) dst[u] = src[x0 + u];
        }
    return patch;
}

}  // namespace bbfcn
