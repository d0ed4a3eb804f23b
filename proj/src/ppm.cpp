#include "ribsr/ppm.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <vector>

namespace ribsr {

namespace {

// Reads one whitespace-delimited token, skipping '#' comment lines.
std::string next_token(std::istream& in) {
    std::string tok;
    int c;
    while ((c = in.get()) != EOF) {
        if (c == '#') {
            while ((c = in.get()) != EOF && c != '\n') {
            }
            continue;
        }
        if (!std::isspace(c)) {
            tok.push_back(static_cast<char>(c));
            while ((c = in.get()) != EOF && !std::isspace(c)) tok.push_back(static_cast<char>(c));
            return tok;
        }
    }
    throw FormatError("ppm: unexpected end of header");
}

std::size_t parse_size(const std::string& tok, const char* what) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(tok, &pos);
    } catch (...) {
        throw FormatError(std::string("ppm: bad ") + what + " '" + tok + "'");
    }
    if (pos != tok.size() || v == 0)
        throw FormatError(std::string("ppm: bad ") + what + " '" + tok + "'");
    return static_cast<std::size_t>(v);
}

}  // namespace

Tensor load_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for read: " + path);
    std::string magic = next_token(f);
    std::size_t channels;
    if (magic == "P6") {
        channels = 3;
    } else if (magic == "P5") {
        channels = 1;
    } else {
        throw FormatError("ppm: unsupported magic '" + magic + "' (want P5 or P6)");
    }
    const std::size_t w = parse_size(next_token(f), "width");
    const std::size_t h = parse_size(next_token(f), "height");
    const std::size_t maxval = parse_size(next_token(f), "maxval");
    if (maxval != 255)
        throw FormatError("ppm: unsupported maxval " + std::to_string(maxval) + " (want 255)");
    // Exactly one whitespace byte separates the header from the payload; the
    // token reader has already consumed it.
    std::vector<unsigned char> raw(w * h * channels);
    f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(f.gcount()) != raw.size())
        throw LengthError("ppm: truncated payload in " + path);
    Tensor img = Tensor::zeros({h, w, channels});
    for (std::size_t i = 0; i < raw.size(); ++i) img[i] = static_cast<float>(raw[i]) / 255.0f;
    return img;
}

void save_ppm(const std::string& path, const Tensor& img) {
    if (img.rank() != 3 || (img.dim(2) != 3 && img.dim(2) != 1))
        throw DimError("save_ppm: image must be [H,W,3] or [H,W,1], got " +
                       format_dims(img.dims()));
    const std::size_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for write: " + path);
    f << (c == 3 ? "P6" : "P5") << "\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> raw(img.numel());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        float v = std::round(img[i] * 255.0f);
        if (v < 0.0f) v = 0.0f;
        if (v > 255.0f) v = 255.0f;
        raw[i] = static_cast<unsigned char>(v);
    }
    f.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!f) throw IoError("write failed: " + path);
}

}  // namespace ribsr
