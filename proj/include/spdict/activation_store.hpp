#ifndef SPDICT_ACTIVATION_STORE_HPP
#define SPDICT_ACTIVATION_STORE_HPP

#include <list>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <span>

#include "json.hpp"

#include "common.hpp"

/**
 * @file activation_store.hpp
 * @brief Activation shard format, dataset manifests and shuffled mini-batch streaming.
 *
 * A shard is a flat file:
 *
 *     "SPDICT01" | u32 version | u32 dtype | u64 dim | u64 count | count*dim f32
 *
 * all little-endian. A dataset is a JSON manifest listing shards in global row
 * order plus an optional sidecar of u16 labels, one per global row.
 */

namespace spdict {

inline constexpr std::string_view kShardMagic = "SPDICT01";
inline constexpr std::uint32_t kShardVersion = 1;
inline constexpr std::size_t kShardHeaderBytes = 8 + 4 + 4 + 8 + 8;

enum class DType : std::uint32_t { f32 = 0 };

struct ShardHeader {
    std::uint32_t version = kShardVersion;
    DType dtype = DType::f32;
    std::uint64_t dim = 0;
    std::uint64_t count = 0;
};

struct ShardSummary {
    std::uint64_t count = 0;
    std::string checksum;
};

/**
 * Writes `rows` (count x dim) as a v1 shard. Values are narrowed to f32; any
 * value that is non-finite before or after narrowing is rejected with its row index.
 */
template <class Derived>
ShardSummary write_shard(const Eigen::MatrixBase<Derived>& rows, Index dim, const std::filesystem::path& path) {
    require(rows.rows() >= 1, "write_shard: no rows");
    require(rows.cols() == dim && dim >= 1,
            "write_shard: row width " + std::to_string(rows.cols()) + " does not match dim " + std::to_string(dim));

    std::string bytes;
    bytes.reserve(kShardHeaderBytes + static_cast<std::size_t>(rows.size()) * sizeof(float));
    bytes.append(kShardMagic);
    detail::put(bytes, kShardVersion);
    detail::put(bytes, static_cast<std::uint32_t>(DType::f32));
    detail::put(bytes, static_cast<std::uint64_t>(dim));
    detail::put(bytes, static_cast<std::uint64_t>(rows.rows()));
    for (Index r = 0; r < rows.rows(); ++r) {
        for (Index c = 0; c < dim; ++c) {
            const auto value = static_cast<float>(rows(r, c));
            if (!std::isfinite(static_cast<double>(rows(r, c))) || !std::isfinite(value)) {
                throw InvalidArgument("write_shard: non-finite at row " + std::to_string(r));
            }
            detail::put(bytes, value);
        }
    }
    write_file(path, bytes);
    return {static_cast<std::uint64_t>(rows.rows()), digest_bytes(bytes)};
}

inline ShardHeader parse_shard_header(detail::Reader& in) {
    auto magic = in.take(kShardMagic.size());
    if (magic != kShardMagic) {
        throw FormatError(in.origin() + ": bad shard magic");
    }
    ShardHeader h;
    h.version = in.get<std::uint32_t>();
    if (h.version != kShardVersion) {
        throw FormatError(in.origin() + ": unsupported shard version " + std::to_string(h.version));
    }
    auto dtype = in.get<std::uint32_t>();
    if (dtype != static_cast<std::uint32_t>(DType::f32)) {
        throw FormatError(in.origin() + ": unsupported dtype tag " + std::to_string(dtype));
    }
    h.dim = in.get<std::uint64_t>();
    h.count = in.get<std::uint64_t>();
    if (h.dim < 1 || h.count < 1) {
        throw FormatError(in.origin() + ": shard must have dim >= 1 and count >= 1");
    }
    return h;
}

/// Reads and validates just the header, checking the file length against it.
inline ShardHeader read_shard_header(const std::filesystem::path& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) {
        throw Error("shard not found: " + path.string());
    }
    std::string head(kShardHeaderBytes, '\0');
    file.read(head.data(), static_cast<std::streamsize>(head.size()));
    detail::Reader in(std::string_view(head.data(), static_cast<std::size_t>(file.gcount())), path.string());
    auto h = parse_shard_header(in);
    const auto expected = kShardHeaderBytes + h.count * h.dim * sizeof(float);
    const auto actual = std::filesystem::file_size(path);
    if (actual != expected) {
        throw FormatError(path.string() + ": file length " + std::to_string(actual) + " != expected " +
                          std::to_string(expected));
    }
    return h;
}

inline MatrixF read_shard(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) {
        throw Error("shard not found: " + path.string());
    }
    const std::string bytes = read_file(path);
    detail::Reader in(bytes, path.string());
    auto h = parse_shard_header(in);
    const std::size_t payload = h.count * h.dim * sizeof(float);
    if (in.remaining() != payload) {
        throw FormatError(path.string() + ": payload is " + std::to_string(in.remaining()) + " bytes, expected " +
                          std::to_string(payload));
    }
    MatrixF rows(static_cast<Index>(h.count), static_cast<Index>(h.dim));
    std::memcpy(rows.data(), in.take(payload).data(), payload);
    return rows;
}

/// Label sidecar: `count` little-endian u16 values.
inline void write_labels(const std::vector<std::uint16_t>& labels, const std::filesystem::path& path) {
    std::string bytes;
    bytes.reserve(labels.size() * 2);
    for (auto l : labels) {
        detail::put(bytes, l);
    }
    write_file(path, bytes);
}

inline std::vector<std::uint16_t> read_labels(const std::filesystem::path& path) {
    const std::string bytes = read_file(path);
    if (bytes.size() % 2 != 0) {
        throw FormatError(path.string() + ": label sidecar has odd byte length");
    }
    std::vector<std::uint16_t> labels(bytes.size() / 2);
    std::memcpy(labels.data(), bytes.data(), bytes.size());
    return labels;
}

struct DatasetManifest {
    std::string model_id = "synthetic";
    int layer = -1;
    int patch_rows = 0;
    int patch_cols = 0;
    std::vector<std::string> image_ids;
    std::vector<std::string> shards;
    std::optional<std::string> label_file;
    std::optional<int> class_count;
};

inline nlohmann::ordered_json to_json(const DatasetManifest& m) {
    nlohmann::ordered_json j;
    j["model_id"] = m.model_id;
    j["layer"] = m.layer;
    j["patch_grid"] = {m.patch_rows, m.patch_cols};
    j["image_ids"] = m.image_ids;
    j["shards"] = m.shards;
    j["label_file"] = m.label_file ? nlohmann::ordered_json(*m.label_file) : nlohmann::ordered_json(nullptr);
    j["class_count"] = m.class_count ? nlohmann::ordered_json(*m.class_count) : nlohmann::ordered_json(nullptr);
    return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j, const std::string& origin) {
    DatasetManifest m;
    auto field = [&](const char* key) -> const nlohmann::json& {
        if (!j.contains(key)) {
            throw FormatError(origin + ": manifest missing key '" + key + "'");
        }
        return j.at(key);
    };
    try {
        m.model_id = field("model_id").get<std::string>();
        m.layer = field("layer").get<int>();
        auto grid = field("patch_grid").get<std::vector<int>>();
        if (grid.size() != 2) {
            throw FormatError(origin + ": patch_grid must have two entries");
        }
        m.patch_rows = grid[0];
        m.patch_cols = grid[1];
        m.image_ids = field("image_ids").get<std::vector<std::string>>();
        m.shards = field("shards").get<std::vector<std::string>>();
        if (j.contains("label_file") && !j["label_file"].is_null()) {
            m.label_file = j["label_file"].get<std::string>();
        }
        if (j.contains("class_count") && !j["class_count"].is_null()) {
            m.class_count = j["class_count"].get<int>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(origin + ": " + e.what());
    }
    if (m.shards.empty()) {
        throw FormatError(origin + ": manifest lists no shards");
    }
    return m;
}

/// Mini-batch of activations, converted to double for the numerical core.
struct ActivationBatch {
    Matrix x;  ///< batch_size x d
    std::vector<Index> row_ids;
    std::optional<std::vector<std::uint16_t>> labels;

    Index size() const { return x.rows(); }
};

/**
 * Read-only handle over a sharded activation dataset.
 *
 * Shards are loaded whole on first touch and kept in a bounded cache, so a
 * globally shuffled id order is served with sequential shard reads. Readers may
 * share a handle across threads.
 */
class Dataset {
public:
    static constexpr std::size_t kDefaultCacheBytes = std::size_t{1} << 30;

    /// Opens a dataset from its manifest, validating every shard header and the label sidecar.
    static Dataset open(const std::filesystem::path& manifest_path, std::size_t cache_bytes = kDefaultCacheBytes) {
        if (!std::filesystem::exists(manifest_path)) {
            throw Error("manifest not found: " + manifest_path.string());
        }
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(read_file(manifest_path));
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError(manifest_path.string() + ": " + e.what());
        }
        Dataset ds;
        ds.manifest_ = manifest_from_json(j, manifest_path.string());
        ds.root_ = manifest_path.parent_path();
        ds.state_->cache_bytes = cache_bytes;
        for (const auto& name : ds.manifest_.shards) {
            const auto path = ds.root_ / name;
            if (!std::filesystem::exists(path)) {
                throw Error("shard not found: " + path.string());
            }
            auto h = read_shard_header(path);
            if (ds.dim_ == 0) {
                ds.dim_ = static_cast<Index>(h.dim);
            } else if (ds.dim_ != static_cast<Index>(h.dim)) {
                throw FormatError(path.string() + ": dim " + std::to_string(h.dim) + " differs from dataset dim " +
                                  std::to_string(ds.dim_));
            }
            ds.offsets_.push_back(ds.count_);
            ds.count_ += static_cast<Index>(h.count);
            ds.state_->shards.push_back({path, nullptr});
        }
        ds.offsets_.push_back(ds.count_);
        if (ds.manifest_.label_file) {
            auto labels = read_labels(ds.root_ / *ds.manifest_.label_file);
            if (static_cast<Index>(labels.size()) != ds.count_) {
                throw FormatError("label count mismatch: expected " + std::to_string(ds.count_) + ", actual " +
                                  std::to_string(labels.size()));
            }
            ds.set_labels(std::move(labels), ds.manifest_.class_count);
        }
        return ds;
    }

    /// Wraps an in-memory matrix as a single-shard dataset.
    static Dataset from_memory(MatrixF rows, std::optional<std::vector<std::uint16_t>> labels = std::nullopt,
                               std::optional<int> class_count = std::nullopt) {
        require(rows.rows() >= 1 && rows.cols() >= 1, "dataset must have at least one row and one column");
        require(rows.allFinite(), "dataset rows must be finite");
        Dataset ds;
        ds.dim_ = rows.cols();
        ds.count_ = rows.rows();
        ds.offsets_ = {0, ds.count_};
        ds.manifest_.shards = {"<memory>"};
        ds.state_->shards.push_back({{}, std::make_shared<const MatrixF>(std::move(rows))});
        if (labels) {
            require(static_cast<Index>(labels->size()) == ds.count_,
                    "label count mismatch: expected " + std::to_string(ds.count_) + ", actual " +
                        std::to_string(labels->size()));
            ds.set_labels(std::move(*labels), class_count);
        }
        return ds;
    }

    Index count() const { return count_; }
    Index dim() const { return dim_; }
    bool has_labels() const { return labels_.has_value(); }
    const std::vector<std::uint16_t>& labels() const {
        if (!labels_) {
            throw Error("dataset has no labels");
        }
        return *labels_;
    }
    int class_count() const { return class_count_; }
    const DatasetManifest& manifest() const { return manifest_; }
    const std::filesystem::path& root() const { return root_; }

    /// Gathers the given global rows, in the given order, into a batch.
    ActivationBatch gather(std::span<const Index> ids) const {
        ActivationBatch batch;
        batch.x.resize(static_cast<Index>(ids.size()), dim_);
        batch.row_ids.assign(ids.begin(), ids.end());
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const Index id = ids[i];
            require(id >= 0 && id < count_, "row id out of range: " + std::to_string(id));
            const auto s = shard_of(id);
            auto rows = shard_rows(s);
            batch.x.row(static_cast<Index>(i)) = rows->row(id - offsets_[s]).cast<double>();
        }
        if (labels_) {
            std::vector<std::uint16_t> l(ids.size());
            for (std::size_t i = 0; i < ids.size(); ++i) {
                l[i] = (*labels_)[static_cast<std::size_t>(ids[i])];
            }
            batch.labels = std::move(l);
        }
        return batch;
    }

    /// All rows in global order. Intended for evaluation-sized splits.
    MatrixF load_all() const {
        MatrixF all(count_, dim_);
        for (std::size_t s = 0; s + 1 < offsets_.size(); ++s) {
            auto rows = shard_rows(s);
            all.middleRows(offsets_[s], rows->rows()) = *rows;
        }
        return all;
    }

private:
    struct Shard {
        std::filesystem::path path;
        std::shared_ptr<const MatrixF> rows;
    };

    // Cached shard data lives behind a shared pointer so copies of a handle share one cache.
    struct State {
        std::mutex mutex;
        std::vector<Shard> shards;
        std::list<std::size_t> lru;
        std::size_t cache_bytes = kDefaultCacheBytes;
        std::size_t cached_bytes = 0;
    };

    Dataset() : state_(std::make_shared<State>()) {}

    void set_labels(std::vector<std::uint16_t> labels, std::optional<int> class_count) {
        int max_label = -1;
        for (auto l : labels) {
            max_label = std::max<int>(max_label, l);
        }
        class_count_ = class_count.value_or(max_label + 1);
        if (max_label >= class_count_) {
            throw FormatError("label " + std::to_string(max_label) + " is not below class count " +
                              std::to_string(class_count_));
        }
        labels_ = std::move(labels);
    }

    std::size_t shard_of(Index id) const {
        auto it = std::upper_bound(offsets_.begin(), offsets_.end(), id);
        return static_cast<std::size_t>(it - offsets_.begin() - 1);
    }

    std::shared_ptr<const MatrixF> shard_rows(std::size_t s) const {
        std::lock_guard lock(state_->mutex);
        auto& shard = state_->shards[s];
        if (shard.rows) {
            if (!shard.path.empty()) {
                state_->lru.remove(s);
                state_->lru.push_back(s);
            }
            return shard.rows;
        }
        auto rows = std::make_shared<const MatrixF>(read_shard(shard.path));
        const auto bytes = static_cast<std::size_t>(rows->size()) * sizeof(float);
        while (!state_->lru.empty() && state_->cached_bytes + bytes > state_->cache_bytes) {
            auto victim = state_->lru.front();
            state_->lru.pop_front();
            state_->cached_bytes -= static_cast<std::size_t>(state_->shards[victim].rows->size()) * sizeof(float);
            state_->shards[victim].rows.reset();
        }
        shard.rows = rows;
        state_->lru.push_back(s);
        state_->cached_bytes += bytes;
        return rows;
    }

    DatasetManifest manifest_;
    std::filesystem::path root_;
    Index dim_ = 0;
    Index count_ = 0;
    std::vector<Index> offsets_;
    std::optional<std::vector<std::uint16_t>> labels_;
    int class_count_ = 0;
    std::shared_ptr<State> state_;
};

/**
 * Writes rows (and optional labels) as a sharded dataset under `dir` and
 * returns the manifest path. `meta` supplies provenance fields; its shard and
 * label entries are overwritten.
 */
inline std::filesystem::path write_dataset(const std::filesystem::path& dir, const MatrixF& rows,
                                           const std::optional<std::vector<std::uint16_t>>& labels,
                                           DatasetManifest meta = {}, Index shard_rows = 65536) {
    require(shard_rows >= 1, "shard_rows must be positive");
    std::filesystem::create_directories(dir);
    meta.shards.clear();
    for (Index start = 0, s = 0; start < rows.rows(); start += shard_rows, ++s) {
        std::ostringstream name;
        name << "shard_" << std::setw(5) << std::setfill('0') << s << ".bin";
        const Index n = std::min(shard_rows, rows.rows() - start);
        write_shard(rows.middleRows(start, n), rows.cols(), dir / name.str());
        meta.shards.push_back(name.str());
    }
    if (labels) {
        require(static_cast<Index>(labels->size()) == rows.rows(), "label count must equal row count");
        write_labels(*labels, dir / "labels.u16");
        meta.label_file = "labels.u16";
    } else {
        meta.label_file.reset();
    }
    const auto path = dir / "manifest.json";
    write_file(path, to_json(meta).dump(2) + "\n");
    return path;
}

/// Seed for the shuffle of epoch `epoch` under base seed `seed` (splitmix64 finalizer).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Global row permutation used for epoch `epoch`.
inline std::vector<Index> epoch_permutation(Index count, std::uint64_t seed, std::uint64_t epoch) {
    std::vector<Index> ids(static_cast<std::size_t>(count));
    std::iota(ids.begin(), ids.end(), Index{0});
    std::mt19937_64 rng(mix_seed(seed, epoch));
    std::shuffle(ids.begin(), ids.end(), rng);
    return ids;
}

/**
 * One epoch of shuffled mini-batches. Every row appears exactly once; the final
 * batch may be short.
 */
class BatchStream {
public:
    BatchStream(const Dataset& dataset, Index batch_size, std::uint64_t seed, std::uint64_t epoch = 0)
        : dataset_(&dataset), batch_size_(batch_size) {
        require(batch_size >= 1, "batch_size must be >= 1");
        order_ = epoch_permutation(dataset.count(), seed, epoch);
    }

    std::optional<ActivationBatch> next() {
        if (pos_ >= order_.size()) {
            return std::nullopt;
        }
        const auto n = std::min<std::size_t>(static_cast<std::size_t>(batch_size_), order_.size() - pos_);
        auto batch = dataset_->gather(std::span<const Index>(order_).subspan(pos_, n));
        pos_ += n;
        return batch;
    }

private:
    const Dataset* dataset_;
    Index batch_size_;
    std::vector<Index> order_;
    std::size_t pos_ = 0;
};

inline BatchStream stream_batches(const Dataset& dataset, Index batch_size, std::uint64_t seed,
                                  std::uint64_t epoch = 0) {
    return BatchStream(dataset, batch_size, seed, epoch);
}

/// Planted-dictionary data and the codes that generated it.
struct SyntheticData {
    Dataset dataset;
    Matrix codes;  ///< count x n_true, exactly s nonzeros per row
};

struct SyntheticOptions {
    double code_min = 0.5;  ///< nonzero code values are uniform in [code_min, code_max]
    double code_max = 1.5;
    /// When positive, each row's first active atom is drawn from atoms [0, labeled_atoms) and
    /// becomes the row's label; the remaining s-1 atoms come from [labeled_atoms, n_true).
    Index labeled_atoms = 0;
};

/// Random dictionary with i.i.d. Gaussian entries and unit-norm columns.
inline Matrix random_dictionary(Index d, Index n_true, std::uint64_t seed) {
    require(d >= 1 && n_true >= 1, "dictionary shape must be positive");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    Matrix dict(d, n_true);
    for (Index j = 0; j < n_true; ++j) {
        for (Index i = 0; i < d; ++i) {
            dict(i, j) = normal(rng);
        }
        dict.col(j).normalize();
    }
    return dict;
}

/**
 * Draws `count` rows x = D * code + N(0, sigma^2 I), where each code has exactly
 * `s` nonzero entries at distinct atoms.
 */
inline SyntheticData make_synthetic(const Matrix& dictionary, Index s, Index count, double sigma, std::uint64_t seed,
                                    const SyntheticOptions& options = {}) {
    const Index d = dictionary.rows();
    const Index n_true = dictionary.cols();
    require(count >= 1, "make_synthetic: empty dataset (count must be >= 1)");
    require(s >= 1 && s <= n_true, "make_synthetic: sparsity must satisfy 1 <= s <= n_true");
    require(sigma >= 0, "make_synthetic: sigma must be non-negative");
    require(options.code_min >= 0 && options.code_min <= options.code_max, "make_synthetic: bad code range");
    for (Index j = 0; j < n_true; ++j) {
        if (std::abs(dictionary.col(j).norm() - 1.0) > 1e-6) {
            throw InvalidArgument("make_synthetic: dictionary column " + std::to_string(j) + " is not unit norm");
        }
    }
    const Index labeled = options.labeled_atoms;
    if (labeled > 0) {
        require(labeled <= n_true && labeled <= 65536, "make_synthetic: too many labeled atoms");
        require(s - 1 <= n_true - labeled, "make_synthetic: not enough unlabeled atoms for s - 1 distractors");
    }

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    std::uniform_real_distribution<double> magnitude(options.code_min, options.code_max);

    Matrix codes = Matrix::Zero(count, n_true);
    MatrixF rows(count, d);
    std::optional<std::vector<std::uint16_t>> labels;
    if (labeled > 0) {
        labels.emplace(static_cast<std::size_t>(count));
    }
    std::vector<Index> pool(static_cast<std::size_t>(n_true));
    std::iota(pool.begin(), pool.end(), Index{0});
    for (Index r = 0; r < count; ++r) {
        if (labeled > 0) {
            const auto cls = std::uniform_int_distribution<Index>(0, labeled - 1)(rng);
            (*labels)[static_cast<std::size_t>(r)] = static_cast<std::uint16_t>(cls);
            codes(r, cls) = magnitude(rng);
            // Partial Fisher-Yates over the unlabeled atoms.
            for (Index t = 0; t < s - 1; ++t) {
                auto pick = std::uniform_int_distribution<Index>(labeled + t, n_true - 1)(rng);
                std::swap(pool[static_cast<std::size_t>(labeled + t)], pool[static_cast<std::size_t>(pick)]);
                codes(r, pool[static_cast<std::size_t>(labeled + t)]) = magnitude(rng);
            }
        } else {
            for (Index t = 0; t < s; ++t) {
                auto pick = std::uniform_int_distribution<Index>(t, n_true - 1)(rng);
                std::swap(pool[static_cast<std::size_t>(t)], pool[static_cast<std::size_t>(pick)]);
                codes(r, pool[static_cast<std::size_t>(t)]) = magnitude(rng);
            }
        }
        Vector x = dictionary * codes.row(r).transpose();
        if (sigma > 0) {
            for (Index i = 0; i < d; ++i) {
                x(i) += sigma * noise(rng);
            }
        }
        rows.row(r) = x.transpose().cast<float>();
    }
    std::optional<int> class_count;
    if (labeled > 0) {
        class_count = static_cast<int>(labeled);
    }
    return {Dataset::from_memory(std::move(rows), std::move(labels), class_count), std::move(codes)};
}

}  // namespace spdict

#endif
