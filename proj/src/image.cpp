#include "hgpe/image.hpp"

#include <fstream>
#include <stdexcept>

#include "hgpe/ops.hpp"

namespace hgpe {

namespace {

// Reads one whitespace-delimited token, skipping '#' comments.
std::string next_token(std::istream& in) {
    std::string tok;
    int c;
    while ((c = in.get()) != EOF) {
        if (c == '#') {
            while ((c = in.get()) != EOF && c != '\n') {}
            continue;
        }
        if (std::isspace(c)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(static_cast<char>(c));
    }
    return tok;
}

}  // namespace

Tensor load_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("ppm: cannot open " + path);
    if (next_token(in) != "P6") throw std::runtime_error("ppm: not a binary P6 file: " + path);
    int w = 0, h = 0, maxval = 0;
    try {
        w = std::stoi(next_token(in));
        h = std::stoi(next_token(in));
        maxval = std::stoi(next_token(in));
    } catch (const std::exception&) {
        throw std::runtime_error("ppm: malformed header in " + path);
    }
    if (w < 1 || h < 1) throw std::runtime_error("ppm: bad dimensions in " + path);
    if (maxval < 1 || maxval > 255)
        throw std::runtime_error("ppm: unsupported maxval " + std::to_string(maxval) + " in " + path);
    std::vector<unsigned char> raw(static_cast<size_t>(w) * h * 3);
    if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
        throw std::runtime_error("ppm: truncated pixel data in " + path);
    Tensor img({1, 3, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at4(0, c, y, x) = static_cast<double>(raw[(static_cast<size_t>(y) * w + x) * 3 +
                                                              static_cast<size_t>(c)]);
    return img;
}

void save_ppm(const std::string& path, const Tensor& img) {
    require_4d(img.dims(), "save_ppm");
    if (img.dim(0) != 1 || img.dim(1) != 3) fail("save_ppm: expected [1,3,H,W]");
    const int64_t h = img.dim(2), w = img.dim(3);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("ppm: cannot write " + path);
    out << "P6\n" << w << " " << h << "\n255\n";
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            for (int64_t c = 0; c < 3; ++c) {
                const double v = std::min(255.0, std::max(0.0, img.at4(0, c, y, x)));
                out.put(static_cast<char>(static_cast<unsigned char>(v + 0.5)));
            }
}

Tensor resize_nearest(const Tensor& img, int out_h, int out_w) {
    require_4d(img.dims(), "resize_nearest");
    const int64_t n = img.dim(0), c = img.dim(1), h = img.dim(2), w = img.dim(3);
    Tensor out({n, c, out_h, out_w});
    for (int64_t in = 0; in < n; ++in)
        for (int64_t ic = 0; ic < c; ++ic)
            for (int64_t y = 0; y < out_h; ++y) {
                const int64_t sy = std::min<int64_t>(h - 1, y * h / out_h);
                for (int64_t x = 0; x < out_w; ++x) {
                    const int64_t sx = std::min<int64_t>(w - 1, x * w / out_w);
                    out.at4(in, ic, y, x) = img.at4(in, ic, sy, sx);
                }
            }
    return out;
}

Tensor normalize_image(const Tensor& img) {
    Tensor out(img.dims());
    for (int64_t i = 0; i < img.numel(); ++i) out[i] = (img[i] / 255.0 - 0.5) / 0.5;
    return out;
}

}  // namespace hgpe
