#pragma once

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "atmskd/data.hpp"

namespace atmskd {

struct FolderLoadStats {
    int loaded = 0;
    int skipped_undecodable = 0;
};

namespace detail {

inline bool has_image_extension(const std::filesystem::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

inline Tensor decode_and_preprocess(const cv::Mat& bgr, int image_size) {
    cv::Mat resized;
    cv::resize(bgr, resized, cv::Size(image_size, image_size), 0, 0, cv::INTER_LINEAR);
    const std::int64_t plane = static_cast<std::int64_t>(image_size) * image_size;
    std::vector<double> data(static_cast<std::size_t>(3 * plane));
    for (int y = 0; y < image_size; ++y)
        for (int x = 0; x < image_size; ++x) {
            const cv::Vec3b px = resized.at<cv::Vec3b>(y, x);
            // BGR -> RGB, scaled to [0,1]
            data[static_cast<std::size_t>(0 * plane + y * image_size + x)] = px[2] / 255.0;
            data[static_cast<std::size_t>(1 * plane + y * image_size + x)] = px[1] / 255.0;
            data[static_cast<std::size_t>(2 * plane + y * image_size + x)] = px[0] / 255.0;
        }
    Tensor img = Tensor::from_data({3, image_size, image_size}, std::move(data));
    normalize_image(img);
    return img;
}

}  // namespace detail

/// Load root/<class_name>/*.png|jpg with classes in sorted name order,
/// bilinear-resized to image_size^2, scaled to [0,1] and channel-normalized.
/// Undecodable files are skipped and counted; an empty class is an error.
inline Dataset load_folder(const std::string& root, int image_size,
                           FolderLoadStats* stats = nullptr) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw IoError("load_folder: '" + root + "' is not a directory");
    std::vector<std::string> class_names;
    for (const auto& entry : fs::directory_iterator(root))
        if (entry.is_directory()) class_names.push_back(entry.path().filename().string());
    std::sort(class_names.begin(), class_names.end());
    if (class_names.empty()) throw ValidationError("load_folder: no class directories under '" + root + "'");

    Dataset ds;
    ds.class_names = class_names;
    ds.provenance = "folder";
    ds.image_size = image_size;
    FolderLoadStats local;
    for (int label = 0; label < static_cast<int>(class_names.size()); ++label) {
        std::vector<fs::path> files;
        for (const auto& entry :
             fs::directory_iterator(fs::path(root) / class_names[static_cast<std::size_t>(label)]))
            if (entry.is_regular_file() && detail::has_image_extension(entry.path()))
                files.push_back(entry.path());
        std::sort(files.begin(), files.end());
        int loaded_here = 0;
        for (const auto& file : files) {
            cv::Mat bgr = cv::imread(file.string(), cv::IMREAD_COLOR);
            if (bgr.empty()) {
                ++local.skipped_undecodable;
                continue;
            }
            ds.samples.push_back({detail::decode_and_preprocess(bgr, image_size), label});
            ++loaded_here;
            ++local.loaded;
        }
        if (loaded_here == 0)
            throw ValidationError("load_folder: class '" + class_names[static_cast<std::size_t>(label)] +
                                  "' has no decodable images");
    }
    if (stats) *stats = local;
    return ds;
}

/// Write a dataset back out as root/<class_name>/<index>.png (8-bit RGB,
/// de-normalized). The inverse of load_folder up to u8 quantization.
inline void export_folder(const Dataset& ds, const std::string& root) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(root, ec);
    if (ec) throw IoError("export_folder: cannot create '" + root + "': " + ec.message());
    for (const auto& name : ds.class_names) fs::create_directories(fs::path(root) / name);

    std::vector<int> counters(ds.class_names.size(), 0);
    for (const Sample& s : ds.samples) {
        Tensor img = s.image.detach();
        denormalize_image(img);
        const int size = img.dim(1);
        const std::int64_t plane = static_cast<std::int64_t>(size) * size;
        cv::Mat bgr(size, size, CV_8UC3);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                auto u8 = [&](int c) {
                    const double v = img.data()[static_cast<std::size_t>(c * plane + y * size + x)];
                    return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
                };
                bgr.at<cv::Vec3b>(y, x) = cv::Vec3b(u8(2), u8(1), u8(0));
            }
        char name[32];
        std::snprintf(name, sizeof(name), "%05d.png", counters[static_cast<std::size_t>(s.label)]++);
        const fs::path out = fs::path(root) / ds.class_names[static_cast<std::size_t>(s.label)] / name;
        if (!cv::imwrite(out.string(), bgr))
            throw IoError("export_folder: failed to write '" + out.string() + "'");
    }
}

}  // namespace atmskd
