#pragma once

// Grayscale heatmaps of interaction maps and embedding vectors as binary PGM
// (P5) images, darker cells for higher values, plus a CSV of the raw grid.

#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "convmap/embed.hpp"
#include "convmap/io.hpp"

namespace convmap {

struct Heatmap {
    Index rows = 0;
    Index cols = 0;
    std::vector<std::uint8_t> pixels;  // row-major
    bool constant = false;             // every pixel mid-gray

    std::uint8_t at(Index r, Index c) const { return pixels[std::size_t(r) * cols + c]; }
};

/// Min-max normalization: the maximum maps to 0 (black), the minimum to 255.
inline Heatmap render_heatmap(const Matrix& m) {
    if (m.size() == 0) throw Error("heatmap of an empty matrix");
    if (!m.allFinite()) throw Error("heatmap input contains non-finite values");
    Heatmap h;
    h.rows = Index(m.rows());
    h.cols = Index(m.cols());
    const double lo = m.minCoeff(), hi = m.maxCoeff();
    h.constant = lo == hi;
    h.pixels.resize(std::size_t(m.size()));
    for (Index r = 0; r < h.rows; ++r)
        for (Index c = 0; c < h.cols; ++c) {
            const double v = h.constant ? 128.0 : std::round(255.0 * (hi - m(r, c)) / (hi - lo));
            h.pixels[std::size_t(r) * h.cols + c] = std::uint8_t(v);
        }
    return h;
}

/// A vector as a 1 x K strip.
inline Heatmap render_heatmap(std::span<const double> v) {
    Matrix m(1, Eigen::Index(v.size()));
    for (std::size_t k = 0; k < v.size(); ++k) m(0, Eigen::Index(k)) = v[k];
    return render_heatmap(m);
}

inline std::string encode_pgm(const Heatmap& h) {
    std::string out = "P5\n" + std::to_string(h.cols) + " " + std::to_string(h.rows) + "\n255\n";
    out.append(h.pixels.begin(), h.pixels.end());
    return out;
}

inline Heatmap decode_pgm(std::string_view bytes) {
    Heatmap h;
    std::size_t pos = 0;
    auto token = [&] {
        while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
        const std::size_t start = pos;
        while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
        return std::string(bytes.substr(start, pos - start));
    };
    if (token() != "P5") throw Error("not a binary PGM");
    h.cols = Index(std::stoul(token()));
    h.rows = Index(std::stoul(token()));
    if (token() != "255") throw Error("PGM max value must be 255");
    ++pos;  // single whitespace before the raster
    const std::size_t n = std::size_t(h.rows) * h.cols;
    if (bytes.size() - pos != n) throw Error("PGM raster has the wrong size");
    h.pixels.assign(bytes.begin() + std::ptrdiff_t(pos), bytes.end());
    return h;
}

inline std::string grid_csv(const Matrix& m) {
    std::string out;
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            if (c) out += ',';
            out += io::format_double(m(r, c));
        }
        out += '\n';
    }
    return out;
}

/// Writes <stem>.pgm and <stem>.csv. Returns the rendered image.
inline Heatmap write_heatmap(const std::filesystem::path& stem, const Matrix& m) {
    const auto h = render_heatmap(m);
    io::write_file(stem.string() + ".pgm", encode_pgm(h));
    io::write_file(stem.string() + ".csv", grid_csv(m));
    return h;
}

}  // namespace convmap
