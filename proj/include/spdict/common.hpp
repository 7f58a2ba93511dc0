#ifndef SPDICT_COMMON_HPP
#define SPDICT_COMMON_HPP

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "Eigen/Dense"

/**
 * @file common.hpp
 * @brief Shared types, error classes and small binary I/O helpers.
 */

namespace spdict {

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian and are written with native byte order");

using Index = Eigen::Index;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using MatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input file, config or flag.
class FormatError : public Error {
public:
    using Error::Error;
};

/// A numerical precondition did not hold (shape mismatch, non-finite value, ...).
class InvalidArgument : public Error {
public:
    using Error::Error;
};

inline void require(bool condition, const std::string& message) {
    if (!condition) {
        throw InvalidArgument(message);
    }
}

/**
 * 64-bit FNV-1a. Used for shard checksums and artifact digests; stable across
 * platforms, unlike `std::hash`.
 */
class Fnv1a {
public:
    void update(const void* data, std::size_t size) {
        const auto* bytes = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < size; ++i) {
            state_ ^= bytes[i];
            state_ *= 0x100000001b3ULL;
        }
    }

    void update(std::string_view text) { update(text.data(), text.size()); }

    std::uint64_t value() const { return state_; }

    std::string hex() const {
        std::ostringstream out;
        out << std::hex << std::setw(16) << std::setfill('0') << state_;
        return out.str();
    }

private:
    std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::string digest_bytes(std::string_view bytes) {
    Fnv1a h;
    h.update(bytes);
    return h.hex();
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error("cannot open file: " + path.string());
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error("cannot write file: " + path.string());
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw Error("write failed: " + path.string());
    }
}

inline std::string digest_file(const std::filesystem::path& path) {
    return digest_bytes(read_file(path));
}

namespace detail {

/// Appends the raw little-endian bytes of a trivially copyable value.
template <class T>
void put(std::string& out, const T& value) {
    static_assert(std::is_trivially_copyable_v<T>);
    const char* p = reinterpret_cast<const char*>(&value);
    out.append(p, sizeof(T));
}

/// Bounds-checked cursor over an in-memory byte buffer.
class Reader {
public:
    Reader(std::string_view bytes, std::string origin) : bytes_(bytes), origin_(std::move(origin)) {}

    template <class T>
    T get() {
        static_assert(std::is_trivially_copyable_v<T>);
        need(sizeof(T));
        T value;
        std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return value;
    }

    std::string_view take(std::size_t size) {
        need(size);
        auto view = bytes_.substr(pos_, size);
        pos_ += size;
        return view;
    }

    std::size_t remaining() const { return bytes_.size() - pos_; }
    const std::string& origin() const { return origin_; }

private:
    void need(std::size_t size) const {
        if (bytes_.size() - pos_ < size) {
            throw FormatError(origin_ + ": truncated (needed " + std::to_string(size) + " more bytes at offset " +
                              std::to_string(pos_) + ")");
        }
    }

    std::string_view bytes_;
    std::string origin_;
    std::size_t pos_ = 0;
};

}  // namespace detail

/**
 * Default worker count: `SPDICT_THREADS` if set to a positive integer,
 * otherwise the hardware concurrency.
 */
inline int default_threads() {
    if (const char* env = std::getenv("SPDICT_THREADS")) {
        char* end = nullptr;
        long value = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && value > 0) {
            return static_cast<int>(value);
        }
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

/**
 * Runs `body(i)` for every i in [0, count) over `threads` workers using a static
 * block partition. Bodies must write only to slots owned by their index, which
 * makes the result independent of the worker count.
 */
template <class Body>
void parallel_for(Index count, int threads, Body&& body) {
    if (count <= 0) {
        return;
    }
    const Index workers = std::clamp<Index>(threads, 1, count);
    if (workers == 1) {
        for (Index i = 0; i < count; ++i) {
            body(i);
        }
        return;
    }
    std::vector<std::exception_ptr> failures(static_cast<std::size_t>(workers));
    {
        std::vector<std::jthread> pool;
        pool.reserve(static_cast<std::size_t>(workers));
        for (Index w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                const Index begin = count * w / workers;
                const Index end = count * (w + 1) / workers;
                try {
                    for (Index i = begin; i < end; ++i) {
                        body(i);
                    }
                } catch (...) {
                    failures[static_cast<std::size_t>(w)] = std::current_exception();
                }
            });
        }
    }
    for (auto& failure : failures) {
        if (failure) {
            std::rethrow_exception(failure);
        }
    }
}

}  // namespace spdict

#endif
