#ifndef SPDICT_TOOLS_RENDER_HPP
#define SPDICT_TOOLS_RENDER_HPP

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

// Raster side of exhibit generation: source images are resized to the
// extraction resolution so each patch maps to a fixed pixel cell.

namespace spdict::render {

inline constexpr int kCellPixels = 16;  // pixels per patch at the extraction resolution

/// Finds <dir>/<image_id>, trying common extensions when the id has none.
inline std::optional<std::filesystem::path> find_image(const std::filesystem::path& dir, const std::string& image_id) {
    const std::filesystem::path base = dir / image_id;
    if (std::filesystem::is_regular_file(base)) {
        return base;
    }
    for (const char* ext : {".png", ".jpg", ".jpeg", ".ppm", ".bmp"}) {
        auto candidate = base;
        candidate += ext;
        if (std::filesystem::is_regular_file(candidate)) {
            return candidate;
        }
    }
    return std::nullopt;
}

/// Loads an image and resizes it (bicubic) to grid_cols x grid_rows cells. Empty on failure.
inline cv::Mat load_grid_image(const std::filesystem::path& path, int grid_rows, int grid_cols) {
    cv::Mat img = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (img.empty()) {
        return img;
    }
    cv::Mat resized;
    cv::resize(img, resized, cv::Size(grid_cols * kCellPixels, grid_rows * kCellPixels), 0, 0, cv::INTER_CUBIC);
    return resized;
}

inline cv::Mat crop_patch(const cv::Mat& grid_image, int patch_row, int patch_col) {
    return grid_image(cv::Rect(patch_col * kCellPixels, patch_row * kCellPixels, kCellPixels, kCellPixels)).clone();
}

/**
 * Lays tiles out left to right, top to bottom, each scaled (nearest) to
 * tile_px square with a white gap. Empty tiles render as mid-gray gaps.
 */
inline cv::Mat tile(const std::vector<cv::Mat>& tiles, int columns, int tile_px, int gap = 2) {
    const int count = static_cast<int>(tiles.size());
    const int cols = std::max(1, std::min(columns, count));
    const int rows = std::max(1, (count + cols - 1) / cols);
    cv::Mat canvas(rows * (tile_px + gap) + gap, cols * (tile_px + gap) + gap, CV_8UC3, cv::Scalar(255, 255, 255));
    for (int i = 0; i < count; ++i) {
        const cv::Rect cell(gap + (i % cols) * (tile_px + gap), gap + (i / cols) * (tile_px + gap), tile_px, tile_px);
        if (tiles[static_cast<std::size_t>(i)].empty()) {
            canvas(cell).setTo(cv::Scalar(128, 128, 128));
        } else {
            cv::resize(tiles[static_cast<std::size_t>(i)], canvas(cell), cell.size(), 0, 0, cv::INTER_NEAREST);
        }
    }
    return canvas;
}

/// Blends a colour-mapped patch activation grid over the image; `scale` maps to full intensity.
inline cv::Mat heatmap_overlay(const cv::Mat& grid_image, std::span<const float> activations, int grid_rows,
                               int grid_cols, double scale) {
    CV_Assert(static_cast<int>(activations.size()) == grid_rows * grid_cols);
    cv::Mat grid(grid_rows, grid_cols, CV_32F, const_cast<float*>(activations.data()));
    cv::Mat scaled;
    grid.convertTo(scaled, CV_8U, scale > 0 ? 255.0 / scale : 0.0);
    cv::Mat upsampled, colour, out;
    cv::resize(scaled, upsampled, grid_image.size(), 0, 0, cv::INTER_NEAREST);
    cv::applyColorMap(upsampled, colour, cv::COLORMAP_JET);
    cv::addWeighted(grid_image, 0.55, colour, 0.45, 0.0, out);
    return out;
}

}  // namespace spdict::render

#endif
