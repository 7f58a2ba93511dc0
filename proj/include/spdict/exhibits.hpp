#ifndef SPDICT_EXHIBITS_HPP
#define SPDICT_EXHIBITS_HPP

#include "activation_store.hpp"
#include "metrics.hpp"

/**
 * @file exhibits.hpp
 * @brief Top-activating patch listings for individual latents.
 *
 * Global row r maps to image r / (rows * cols) and, within it, to patch
 * (r % (rows * cols)) in row-major order.
 */

namespace spdict {

struct ExhibitEntry {
    Index rank = 0;
    Index row_id = 0;
    Index image_index = -1;
    std::string image_id;
    int patch_row = -1;
    int patch_col = -1;
    double activation = 0;
};

/// The k rows that most activate `latent`, in descending activation order.
inline std::vector<ExhibitEntry> exhibit_entries(const MatrixF& codes, Index latent, Index k,
                                                 const DatasetManifest& manifest) {
    if (latent < 0 || latent >= codes.cols()) {
        throw InvalidArgument("latent id " + std::to_string(latent) + " out of range [0, " +
                              std::to_string(codes.cols()) + ")");
    }
    std::vector<float> column(static_cast<std::size_t>(codes.rows()));
    for (Index r = 0; r < codes.rows(); ++r) {
        column[static_cast<std::size_t>(r)] = codes(r, latent);
    }
    const auto top = top_k_rows<float>(column, std::min(k, codes.rows()));
    const Index per_image = static_cast<Index>(manifest.patch_rows) * manifest.patch_cols;
    std::vector<ExhibitEntry> out;
    for (std::size_t i = 0; i < top.size(); ++i) {
        ExhibitEntry e;
        e.rank = static_cast<Index>(i);
        e.row_id = top[i];
        e.activation = column[static_cast<std::size_t>(top[i])];
        if (per_image > 0) {
            e.image_index = top[i] / per_image;
            const Index patch = top[i] % per_image;
            e.patch_row = static_cast<int>(patch / manifest.patch_cols);
            e.patch_col = static_cast<int>(patch % manifest.patch_cols);
            if (e.image_index < static_cast<Index>(manifest.image_ids.size())) {
                e.image_id = manifest.image_ids[static_cast<std::size_t>(e.image_index)];
            }
        }
        out.push_back(std::move(e));
    }
    return out;
}

/**
 * Activations of `latent` over every patch of one image, row-major over the
 * patch grid. Patches past the end of `codes` read as 0.
 */
inline std::vector<float> image_patch_activations(const MatrixF& codes, Index latent, Index image_index,
                                                  const DatasetManifest& manifest) {
    require(latent >= 0 && latent < codes.cols(), "latent id " + std::to_string(latent) + " out of range");
    const Index per_image = static_cast<Index>(manifest.patch_rows) * manifest.patch_cols;
    require(per_image > 0, "dataset manifest has no patch grid");
    std::vector<float> out(static_cast<std::size_t>(per_image), 0.0f);
    for (Index p = 0; p < per_image; ++p) {
        const Index row = image_index * per_image + p;
        if (row < codes.rows()) {
            out[static_cast<std::size_t>(p)] = codes(row, latent);
        }
    }
    return out;
}

}  // namespace spdict

#endif
