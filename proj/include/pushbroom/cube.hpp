// Cube file I/O and procedural test cubes. On disk a cube is a little-endian
// float32 payload in band-interleaved-by-line (BIL) order — one acquisition
// line is one contiguous run — plus a human-readable sidecar header
// (<payload>.hdr). In memory cubes are [lines x cols x bands], band fastest.
#pragma once

#include <cstdio>
#include <cstring>
#include <fstream>

#include "pushbroom/config.hpp"
#include "pushbroom/rng.hpp"
#include "pushbroom/tensor.hpp"

namespace pushbroom {

struct CubeHeader {
    int lines = 0, columns = 0, bands = 0;
    std::string dtype = "float32";
    double scale = 1.0;
};

inline std::string header_path(const std::string& payload_path) {
    return payload_path + ".hdr";
}

inline void write_cube(const std::string& path, const Tensor& cube, double scale = 1.0) {
    check_3d("write_cube", cube);
    int L = cube.dim(0), C = cube.dim(1), B = cube.dim(2);
    std::ofstream os(path, std::ios::binary);
    if (!os) fail("cannot write cube payload: " + path);
    std::vector<float> row((size_t)C);
    for (int l = 0; l < L; ++l) {
        for (int b = 0; b < B; ++b) {
            for (int c = 0; c < C; ++c) row[(size_t)c] = (float)(cube.at(l, c, b) / scale);
            os.write((const char*)row.data(), (std::streamsize)(sizeof(float) * row.size()));
        }
    }
    if (!os) fail("short write on cube payload: " + path);
    Config h;
    h.set_int("lines", L);
    h.set_int("columns", C);
    h.set_int("bands", B);
    h.set("dtype", "float32");
    h.set_f64("scale", scale);
    h.save(header_path(path));
}

inline CubeHeader read_cube_header(const std::string& path) {
    Config h = Config::load(header_path(path));
    CubeHeader hd;
    hd.lines = h.get_int("lines");
    hd.columns = h.get_int("columns");
    hd.bands = h.get_int("bands");
    hd.dtype = h.get_str("dtype");
    hd.scale = h.get_f64("scale", 1.0);
    if (hd.dtype != "float32")
        fail("cube header " + header_path(path) + ": unsupported dtype '" + hd.dtype + "'");
    if (hd.lines < 1 || hd.columns < 1 || hd.bands < 1)
        fail("cube header " + header_path(path) + ": non-positive extents");
    return hd;
}

// Streaming line reader: one acquisition line per read, nothing buffered
// beyond it. `max_buffered_lines` is instrumentation for the no-buffering
// contract.
class CubeLineReader {
public:
    explicit CubeLineReader(const std::string& path) : hd_(read_cube_header(path)) {
        is_.open(path, std::ios::binary);
        if (!is_) fail("cannot open cube payload: " + path);
        is_.seekg(0, std::ios::end);
        int64_t want = (int64_t)hd_.lines * hd_.columns * hd_.bands * 4;
        if ((int64_t)is_.tellg() != want)
            fail("cube payload " + path + ": size " + std::to_string((int64_t)is_.tellg()) +
                 " does not match header (" + std::to_string(want) + " bytes)");
        is_.seekg(0);
        raw_.resize((size_t)hd_.columns);
    }

    const CubeHeader& header() const { return hd_; }
    int64_t lines_read() const { return line_; }
    int max_buffered_lines() const { return 1; }

    // next line as [1 x columns x bands]; false at end of cube
    bool next(Tensor& line) {
        if (line_ >= hd_.lines) return false;
        if (line.ndim() != 3 || line.dim(1) != hd_.columns || line.dim(2) != hd_.bands)
            line = Tensor({1, hd_.columns, hd_.bands});
        for (int b = 0; b < hd_.bands; ++b) {
            is_.read((char*)raw_.data(), (std::streamsize)(sizeof(float) * raw_.size()));
            if (is_.gcount() != (std::streamsize)(sizeof(float) * raw_.size()))
                fail("cube payload: truncated read at line " + std::to_string(line_));
            for (int c = 0; c < hd_.columns; ++c) {
                double v = (double)raw_[(size_t)c] * hd_.scale;
                if (!std::isfinite(v))
                    fail("cube payload: non-finite sample at line " + std::to_string(line_));
                line.at(0, c, b) = v;
            }
        }
        ++line_;
        return true;
    }

private:
    CubeHeader hd_;
    std::ifstream is_;
    std::vector<float> raw_;
    int64_t line_ = 0;
};

inline Tensor read_cube(const std::string& path) {
    CubeLineReader r(path);
    const CubeHeader& h = r.header();
    Tensor cube({h.lines, h.columns, h.bands});
    Tensor line;
    int64_t l = 0;
    while (r.next(line)) {
        std::copy(line.data(), line.data() + line.numel(),
                  cube.data() + l * (int64_t)h.columns * h.bands);
        ++l;
    }
    return cube;
}

// Procedural smooth-spectra cube in [0, 1]: a few random low-frequency
// spatial fields, each with a Gaussian bump spectrum, plus slow cosine
// drift along track. Values are rounded through float32 so written cubes
// read back bitwise.
inline Tensor synth_cube(int lines, int cols, int bands, uint64_t seed) {
    if (lines < 1 || cols < 1 || bands < 1) fail("synth_cube: non-positive extents");
    Rng rng(seed);
    int G = 4;
    Tensor cube({lines, cols, bands});
    std::vector<std::vector<double>> spectra((size_t)G, std::vector<double>((size_t)bands));
    for (int g = 0; g < G; ++g) {
        double center = rng.uniform(0.0, (double)(bands - 1));
        double width = rng.uniform(0.15, 0.6) * bands + 0.5;
        double gain = rng.uniform(0.4, 1.0);
        for (int b = 0; b < bands; ++b) {
            double d = (b - center) / width;
            spectra[(size_t)g][(size_t)b] = gain * std::exp(-0.5 * d * d);
        }
    }
    struct Wave {
        double fx, fy, phase, amp;
    };
    std::vector<std::vector<Wave>> waves((size_t)G);
    for (int g = 0; g < G; ++g) {
        int nw = 2 + rng.uniform_int(3);
        for (int w = 0; w < nw; ++w)
            waves[(size_t)g].push_back(Wave{rng.uniform(0.2, 2.5), rng.uniform(0.2, 2.5),
                                            rng.uniform(0.0, 6.283185307179586),
                                            rng.uniform(0.3, 1.0)});
    }
    double mn = 1e300, mx = -1e300;
    for (int l = 0; l < lines; ++l) {
        for (int c = 0; c < cols; ++c) {
            for (int g = 0; g < G; ++g) {
                double field = 0.0;
                for (const Wave& w : waves[(size_t)g])
                    field += w.amp * std::cos(6.283185307179586 *
                                                  (w.fx * c / cols + w.fy * l / lines) +
                                              w.phase);
                field = 0.5 + 0.5 * std::tanh(field);
                for (int b = 0; b < bands; ++b)
                    cube.at(l, c, b) += field * spectra[(size_t)g][(size_t)b];
            }
            for (int b = 0; b < bands; ++b) {
                mn = std::min(mn, cube.at(l, c, b));
                mx = std::max(mx, cube.at(l, c, b));
            }
        }
    }
    double span = mx > mn ? mx - mn : 1.0;
    for (int64_t i = 0; i < cube.numel(); ++i)
        cube[i] = (double)(float)((cube[i] - mn) / span);  // float32-representable in [0,1]
    return cube;
}

}  // namespace pushbroom
