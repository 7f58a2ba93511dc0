#ifndef SPDICT_CHECKPOINT_HPP
#define SPDICT_CHECKPOINT_HPP

#include "common.hpp"
#include "sae.hpp"

/**
 * @file checkpoint.hpp
 * @brief Self-describing model container shared by SAEs and the baselines.
 *
 * Layout (little-endian):
 *
 *     "SPDCKPT1" | u32 version | u32 kind | u32 objective | u32 reserved
 *     u64 n | u64 d | u64 step | u64 prefix_count | prefix_count * u64
 *     u32 tensor_count
 *     per tensor: u32 name_len | name | u32 dtype | u64 rows | u64 cols | payload (row-major)
 *
 * Tensor payloads are f32 except where a tensor is tagged u64 (counts).
 */

namespace spdict {

inline constexpr std::string_view kCheckpointMagic = "SPDCKPT1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class ModelKind : std::uint32_t { sae = 0, kmeans = 1, pca = 2 };

inline std::string to_string(ModelKind k) {
    switch (k) {
        case ModelKind::sae: return "sae";
        case ModelKind::kmeans: return "kmeans";
        case ModelKind::pca: return "pca";
    }
    return "unknown";
}

struct Tensor {
    enum class Type : std::uint32_t { f32 = 0, u64 = 1 };

    std::string name;
    Type type = Type::f32;
    Index rows = 0;
    Index cols = 0;
    std::vector<float> f32;
    std::vector<std::uint64_t> u64;

    template <class Derived>
    static Tensor from_matrix(std::string name, const Eigen::MatrixBase<Derived>& m) {
        Tensor t{std::move(name), Type::f32, m.rows(), m.cols(), {}, {}};
        t.f32.reserve(static_cast<std::size_t>(m.size()));
        for (Index r = 0; r < m.rows(); ++r) {
            for (Index c = 0; c < m.cols(); ++c) {
                t.f32.push_back(static_cast<float>(m(r, c)));
            }
        }
        return t;
    }

    static Tensor from_counts(std::string name, const std::vector<std::uint64_t>& counts) {
        return {std::move(name), Type::u64, static_cast<Index>(counts.size()), 1, {}, counts};
    }

    Matrix to_matrix() const {
        if (type != Type::f32) {
            throw FormatError("tensor '" + name + "' is not f32");
        }
        Matrix m(rows, cols);
        for (Index r = 0; r < rows; ++r) {
            for (Index c = 0; c < cols; ++c) {
                m(r, c) = f32[static_cast<std::size_t>(r * cols + c)];
            }
        }
        return m;
    }
};

struct Checkpoint {
    ModelKind kind = ModelKind::sae;
    Objective objective = Objective::vanilla;
    std::uint64_t n = 0;
    std::uint64_t d = 0;
    std::uint64_t step = 0;
    std::vector<Index> prefixes;
    std::vector<Tensor> tensors;

    const Tensor& tensor(const std::string& name) const {
        for (const auto& t : tensors) {
            if (t.name == name) {
                return t;
            }
        }
        throw FormatError("checkpoint has no tensor '" + name + "'");
    }

    /// Tensor as a matrix, checking its shape.
    Matrix matrix(const std::string& name, Index rows, Index cols) const {
        const auto& t = tensor(name);
        if (t.rows != rows || t.cols != cols) {
            throw FormatError("tensor '" + name + "' has shape " + std::to_string(t.rows) + "x" +
                              std::to_string(t.cols) + ", expected " + std::to_string(rows) + "x" +
                              std::to_string(cols));
        }
        return t.to_matrix();
    }

    std::string encode() const {
        std::string out;
        out.append(kCheckpointMagic);
        detail::put(out, kCheckpointVersion);
        detail::put(out, static_cast<std::uint32_t>(kind));
        detail::put(out, static_cast<std::uint32_t>(objective));
        detail::put(out, std::uint32_t{0});
        detail::put(out, n);
        detail::put(out, d);
        detail::put(out, step);
        detail::put(out, static_cast<std::uint64_t>(prefixes.size()));
        for (auto m : prefixes) {
            detail::put(out, static_cast<std::uint64_t>(m));
        }
        detail::put(out, static_cast<std::uint32_t>(tensors.size()));
        for (const auto& t : tensors) {
            detail::put(out, static_cast<std::uint32_t>(t.name.size()));
            out.append(t.name);
            detail::put(out, static_cast<std::uint32_t>(t.type));
            detail::put(out, static_cast<std::uint64_t>(t.rows));
            detail::put(out, static_cast<std::uint64_t>(t.cols));
            if (t.type == Tensor::Type::f32) {
                out.append(reinterpret_cast<const char*>(t.f32.data()), t.f32.size() * sizeof(float));
            } else {
                out.append(reinterpret_cast<const char*>(t.u64.data()), t.u64.size() * sizeof(std::uint64_t));
            }
        }
        return out;
    }

    static Checkpoint decode(std::string_view bytes, const std::string& origin) {
        detail::Reader in(bytes, origin);
        if (in.take(kCheckpointMagic.size()) != kCheckpointMagic) {
            throw FormatError(origin + ": bad checkpoint magic");
        }
        if (auto v = in.get<std::uint32_t>(); v != kCheckpointVersion) {
            throw FormatError(origin + ": unsupported checkpoint version " + std::to_string(v));
        }
        Checkpoint ck;
        auto kind = in.get<std::uint32_t>();
        if (kind > static_cast<std::uint32_t>(ModelKind::pca)) {
            throw FormatError(origin + ": unknown model kind " + std::to_string(kind));
        }
        ck.kind = static_cast<ModelKind>(kind);
        auto objective = in.get<std::uint32_t>();
        if (objective > static_cast<std::uint32_t>(Objective::matryoshka)) {
            throw FormatError(origin + ": unknown objective tag " + std::to_string(objective));
        }
        ck.objective = static_cast<Objective>(objective);
        in.get<std::uint32_t>();
        ck.n = in.get<std::uint64_t>();
        ck.d = in.get<std::uint64_t>();
        ck.step = in.get<std::uint64_t>();
        const auto prefix_count = in.get<std::uint64_t>();
        if (prefix_count > in.remaining() / sizeof(std::uint64_t)) {
            throw FormatError(origin + ": truncated prefix list");
        }
        for (std::uint64_t i = 0; i < prefix_count; ++i) {
            ck.prefixes.push_back(static_cast<Index>(in.get<std::uint64_t>()));
        }
        const auto tensor_count = in.get<std::uint32_t>();
        for (std::uint32_t i = 0; i < tensor_count; ++i) {
            Tensor t;
            t.name = std::string(in.take(in.get<std::uint32_t>()));
            auto type = in.get<std::uint32_t>();
            if (type > static_cast<std::uint32_t>(Tensor::Type::u64)) {
                throw FormatError(origin + ": tensor '" + t.name + "' has unknown dtype");
            }
            t.type = static_cast<Tensor::Type>(type);
            t.rows = static_cast<Index>(in.get<std::uint64_t>());
            t.cols = static_cast<Index>(in.get<std::uint64_t>());
            const auto count = static_cast<std::size_t>(t.rows) * static_cast<std::size_t>(t.cols);
            const auto width = t.type == Tensor::Type::f32 ? sizeof(float) : sizeof(std::uint64_t);
            if (count > in.remaining() / width) {
                throw FormatError(origin + ": tensor '" + t.name + "' is truncated");
            }
            auto payload = in.take(count * width);
            if (t.type == Tensor::Type::f32) {
                t.f32.resize(count);
                std::memcpy(t.f32.data(), payload.data(), payload.size());
            } else {
                t.u64.resize(count);
                std::memcpy(t.u64.data(), payload.data(), payload.size());
            }
            ck.tensors.push_back(std::move(t));
        }
        if (in.remaining() != 0) {
            throw FormatError(origin + ": trailing bytes after last tensor");
        }
        return ck;
    }

    void save(const std::filesystem::path& path) const { write_file(path, encode()); }

    static Checkpoint load(const std::filesystem::path& path) { return decode(read_file(path), path.string()); }
};

/**
 * SAE parameters are stored as f32; loading widens back to double, so a
 * save/load cycle is exact for f32-representable parameters.
 */
inline Checkpoint sae_checkpoint(const SaeParams& p, Objective objective, std::uint64_t step,
                                 const PrefixSet& prefixes = {}) {
    Checkpoint ck;
    ck.kind = ModelKind::sae;
    ck.objective = objective;
    ck.n = static_cast<std::uint64_t>(p.n());
    ck.d = static_cast<std::uint64_t>(p.d());
    ck.step = step;
    ck.prefixes = prefixes.sizes();
    ck.tensors = {Tensor::from_matrix("W_enc", p.w_enc), Tensor::from_matrix("b_enc", p.b_enc),
                  Tensor::from_matrix("W_dec", p.w_dec), Tensor::from_matrix("b_dec", p.b_dec)};
    return ck;
}

inline SaeParams sae_from_checkpoint(const Checkpoint& ck) {
    if (ck.kind != ModelKind::sae) {
        throw FormatError("checkpoint holds a " + to_string(ck.kind) + " model, not an SAE");
    }
    const auto n = static_cast<Index>(ck.n);
    const auto d = static_cast<Index>(ck.d);
    SaeParams p;
    p.w_enc = ck.matrix("W_enc", n, d);
    p.b_enc = ck.matrix("b_enc", n, 1);
    p.w_dec = ck.matrix("W_dec", d, n);
    p.b_dec = ck.matrix("b_dec", d, 1);
    return p;
}

/// Rounds every parameter to f32 precision, matching what a checkpoint stores.
inline SaeParams round_to_f32(const SaeParams& p) {
    return {p.w_enc.cast<float>().cast<double>(), p.b_enc.cast<float>().cast<double>(),
            p.w_dec.cast<float>().cast<double>(), p.b_dec.cast<float>().cast<double>()};
}

}  // namespace spdict

#endif
