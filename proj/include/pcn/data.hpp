#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "pcn/matrix.hpp"
#include "pcn/network.hpp"
#include "pcn/rng.hpp"

namespace pcn {

struct FormatError : Error {
    FormatError(const std::string& what, std::size_t offset)
        : Error(what + " (byte offset " + std::to_string(offset) + ")"), byte_offset(offset) {}
    std::size_t byte_offset;
};

struct Dataset {
    Matrix inputs;   // M x N_0
    Matrix targets;  // M x N_L
    std::string name;

    std::size_t size() const { return inputs.rows(); }
};

/// y = -x with x ~ N(1, 0.1); the linear-regression toy task used by the
/// chain and 1MLP experiments.
inline Dataset toy_regression(std::size_t n, Rng& rng) {
    if (n < 1) throw Error("toy_regression: n must be >= 1");
    Dataset d;
    d.name = "toy_regression";
    d.inputs = Matrix(n, 1);
    d.targets = Matrix(n, 1);
    const double std_dev = std::sqrt(0.1);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = 1.0 + std_dev * rng.normal();
        d.inputs(i, 0) = x;
        d.targets(i, 0) = -x;
    }
    return d;
}

struct MatrixCompletionTask {
    Matrix target;        // 10x10, rank 3
    Matrix observed;      // 1 = observed, 0 = masked (exactly 20 masked)
};

/// Fit a 10x10 rank-3 matrix with 20% of the entries masked. The target is a
/// product of two 10x3 standard-Gaussian factors.
inline MatrixCompletionTask matrix_completion_task(Rng& rng) {
    MatrixCompletionTask t;
    const Matrix u = rng.normal_matrix(10, 3);
    const Matrix v = rng.normal_matrix(10, 3);
    t.target = matmul_nt(u, v);

    t.observed = Matrix(10, 10);
    for (std::size_t k = 0; k < 100; ++k) t.observed.data()[k] = 1.0;
    std::vector<std::size_t> idx(100);
    for (std::size_t k = 0; k < 100; ++k) idx[k] = k;
    rng.shuffle(idx);
    for (std::size_t k = 0; k < 20; ++k) t.observed.data()[idx[k]] = 0.0;
    return t;
}

/// The completion task as a supervised batch: inputs are the 10 basis
/// vectors, targets the matrix columns, with the per-entry mask carried over.
inline Batch matrix_completion_batch(const MatrixCompletionTask& task) {
    Batch b;
    b.x = Matrix::identity(10);
    b.y = Matrix(10, 10);
    Matrix mask(10, 10);
    for (std::size_t j = 0; j < 10; ++j)       // sample j = column j
        for (std::size_t r = 0; r < 10; ++r) {
            b.y(j, r) = task.target(r, j);
            mask(j, r) = task.observed(r, j);
        }
    b.y_mask = std::move(mask);
    return b;
}

namespace detail {

inline std::uint32_t read_be_u32(std::istream& in, std::size_t& offset, const char* what) {
    unsigned char buf[4];
    in.read(reinterpret_cast<char*>(buf), 4);
    if (!in) throw FormatError(std::string("IDX: truncated ") + what, offset);
    offset += 4;
    return (std::uint32_t(buf[0]) << 24) | (std::uint32_t(buf[1]) << 16) |
           (std::uint32_t(buf[2]) << 8) | std::uint32_t(buf[3]);
}

}  // namespace detail

/// Reads an MNIST-style IDX image/label pair. Pixels are scaled to [0,1] by
/// /255, labels one-hot encoded with width 10, images flattened row-major.
inline Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream imgs(images_path, std::ios::binary);
    if (!imgs) throw Error("load_mnist_idx: cannot open " + images_path);
    std::size_t off = 0;
    const std::uint32_t magic_i = detail::read_be_u32(imgs, off, "image magic");
    if (magic_i != 2051) throw FormatError("IDX: bad image magic " + std::to_string(magic_i), 0);
    const std::uint32_t count = detail::read_be_u32(imgs, off, "image count");
    const std::uint32_t rows = detail::read_be_u32(imgs, off, "image rows");
    const std::uint32_t cols = detail::read_be_u32(imgs, off, "image cols");
    const std::size_t pixels = std::size_t(rows) * cols;

    Dataset d;
    d.name = "mnist_idx";
    d.inputs = Matrix(count, pixels);
    std::vector<unsigned char> buf(pixels);
    for (std::uint32_t i = 0; i < count; ++i) {
        imgs.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(pixels));
        if (!imgs) throw FormatError("IDX: truncated image payload", off);
        off += pixels;
        double* row = d.inputs.row(i);
        for (std::size_t k = 0; k < pixels; ++k) row[k] = buf[k] / 255.0;
    }

    std::ifstream labs(labels_path, std::ios::binary);
    if (!labs) throw Error("load_mnist_idx: cannot open " + labels_path);
    std::size_t loff = 0;
    const std::uint32_t magic_l = detail::read_be_u32(labs, loff, "label magic");
    if (magic_l != 2049) throw FormatError("IDX: bad label magic " + std::to_string(magic_l), 0);
    const std::uint32_t lcount = detail::read_be_u32(labs, loff, "label count");
    if (lcount != count) throw FormatError("IDX: image/label count mismatch", loff);

    d.targets = Matrix(count, 10);
    for (std::uint32_t i = 0; i < lcount; ++i) {
        const int byte = labs.get();
        if (byte == EOF) throw FormatError("IDX: truncated label payload", loff);
        if (byte > 9) throw FormatError("IDX: label byte " + std::to_string(byte) + " > 9", loff);
        d.targets(i, static_cast<std::size_t>(byte)) = 1.0;
        ++loff;
    }
    return d;
}

/// Writes an IDX image/label pair (square images, side x side bytes).
inline void write_mnist_idx(const std::string& images_path, const std::string& labels_path,
                            const std::vector<std::vector<unsigned char>>& images,
                            const std::vector<unsigned char>& labels, std::uint32_t side) {
    auto put_be = [](std::ostream& out, std::uint32_t v) {
        const unsigned char buf[4] = {static_cast<unsigned char>(v >> 24),
                                      static_cast<unsigned char>(v >> 16),
                                      static_cast<unsigned char>(v >> 8),
                                      static_cast<unsigned char>(v)};
        out.write(reinterpret_cast<const char*>(buf), 4);
    };
    std::ofstream imgs(images_path, std::ios::binary);
    if (!imgs) throw Error("write_mnist_idx: cannot open " + images_path);
    put_be(imgs, 2051);
    put_be(imgs, static_cast<std::uint32_t>(images.size()));
    put_be(imgs, side);
    put_be(imgs, side);
    for (const auto& img : images)
        imgs.write(reinterpret_cast<const char*>(img.data()),
                   static_cast<std::streamsize>(img.size()));

    std::ofstream labs(labels_path, std::ios::binary);
    if (!labs) throw Error("write_mnist_idx: cannot open " + labels_path);
    put_be(labs, 2049);
    put_be(labs, static_cast<std::uint32_t>(labels.size()));
    labs.write(reinterpret_cast<const char*>(labels.data()),
               static_cast<std::streamsize>(labels.size()));
}

/// Hermetic stand-in for MNIST in CI: random 784-dim inputs in [0,1] with
/// random one-hot labels. Unlearnable by construction; use
/// prototype_classification for runs that need a learnable task.
inline Dataset mnist_like(std::size_t n, Rng& rng) {
    Dataset d;
    d.name = "mnist_like";
    d.inputs = Matrix(n, 784);
    d.targets = Matrix(n, 10);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < 784; ++j) d.inputs(i, j) = rng.uniform();
        d.targets(i, rng.uniform_below(10)) = 1.0;
    }
    return d;
}

/// Learnable 10-class image-like task: each sample is a fixed class prototype
/// plus pixel noise, clamped to [0,1] and quantised to byte precision so it
/// round-trips through the IDX format exactly.
inline Dataset prototype_classification(std::size_t n, Rng& rng, double noise = 0.35,
                                        std::size_t side = 28) {
    const std::size_t pixels = side * side;
    std::vector<std::vector<double>> prototypes(10, std::vector<double>(pixels));
    for (auto& p : prototypes)
        for (double& v : p) v = rng.uniform();

    Dataset d;
    d.name = "prototype_classification";
    d.inputs = Matrix(n, pixels);
    d.targets = Matrix(n, 10);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = static_cast<std::size_t>(rng.uniform_below(10));
        d.targets(i, c) = 1.0;
        for (std::size_t j = 0; j < pixels; ++j) {
            double v = prototypes[c][j] + noise * rng.normal();
            v = std::clamp(v, 0.0, 1.0);
            d.inputs(i, j) = std::round(v * 255.0) / 255.0;
        }
    }
    return d;
}

/// Epoch-shuffled partition into batches of size B; the final short batch is
/// kept. Returns row-index groups so callers can slice lazily.
inline std::vector<std::vector<std::size_t>> batch_indices(std::size_t dataset_size, std::size_t b,
                                                           Rng& rng) {
    if (b < 1) throw Error("batches: batch size must be >= 1");
    std::vector<std::size_t> idx(dataset_size);
    for (std::size_t i = 0; i < dataset_size; ++i) idx[i] = i;
    rng.shuffle(idx);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t start = 0; start < dataset_size; start += b) {
        const std::size_t n = std::min(b, dataset_size - start);
        out.emplace_back(idx.begin() + start, idx.begin() + start + n);
    }
    return out;
}

inline Batch slice_batch(const Dataset& d, const std::vector<std::size_t>& rows) {
    Batch b;
    b.x = Matrix(rows.size(), d.inputs.cols());
    b.y = Matrix(rows.size(), d.targets.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < d.inputs.cols(); ++j) b.x(i, j) = d.inputs(rows[i], j);
        for (std::size_t j = 0; j < d.targets.cols(); ++j) b.y(i, j) = d.targets(rows[i], j);
    }
    return b;
}

/// Epoch-shuffled concrete batches.
inline std::vector<Batch> batches(const Dataset& d, std::size_t b, Rng& rng) {
    std::vector<Batch> out;
    for (const auto& rows : batch_indices(d.size(), b, rng)) out.push_back(slice_batch(d, rows));
    return out;
}

/// In-place per-feature standardisation to zero mean and unit variance using
/// the dataset's own statistics; returns the (mean, std) pairs so a test
/// split can reuse the training statistics.
inline std::vector<std::pair<double, double>> standardize_inputs(Dataset& d) {
    std::vector<std::pair<double, double>> stats(d.inputs.cols());
    const double n = static_cast<double>(d.size());
    for (std::size_t j = 0; j < d.inputs.cols(); ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < d.size(); ++i) mean += d.inputs(i, j);
        mean /= n;
        double var = 0.0;
        for (std::size_t i = 0; i < d.size(); ++i) {
            const double c = d.inputs(i, j) - mean;
            var += c * c;
        }
        const double sd = std::sqrt(std::max(var / n, 1e-12));
        stats[j] = {mean, sd};
        for (std::size_t i = 0; i < d.size(); ++i)
            d.inputs(i, j) = (d.inputs(i, j) - mean) / sd;
    }
    return stats;
}

inline void apply_standardization(Dataset& d,
                                  const std::vector<std::pair<double, double>>& stats) {
    if (stats.size() != d.inputs.cols()) throw ShapeError("apply_standardization: width mismatch");
    for (std::size_t j = 0; j < d.inputs.cols(); ++j)
        for (std::size_t i = 0; i < d.size(); ++i)
            d.inputs(i, j) = (d.inputs(i, j) - stats[j].first) / stats[j].second;
}

/// Dataset dump for inspection: one row per sample, inputs then targets.
inline void write_dataset_csv(const std::string& path, const Dataset& d) {
    std::ofstream out(path);
    if (!out) throw Error("write_dataset_csv: cannot open " + path);
    for (std::size_t j = 0; j < d.inputs.cols(); ++j) out << "x" << j << ",";
    for (std::size_t j = 0; j < d.targets.cols(); ++j)
        out << "y" << j << (j + 1 < d.targets.cols() ? "," : "");
    out << "\n";
    char buf[40];
    for (std::size_t i = 0; i < d.size(); ++i) {
        for (std::size_t j = 0; j < d.inputs.cols(); ++j) {
            std::snprintf(buf, sizeof(buf), "%.17g", d.inputs(i, j));
            out << buf << ",";
        }
        for (std::size_t j = 0; j < d.targets.cols(); ++j) {
            std::snprintf(buf, sizeof(buf), "%.17g", d.targets(i, j));
            out << buf << (j + 1 < d.targets.cols() ? "," : "");
        }
        out << "\n";
    }
}

}  // namespace pcn
