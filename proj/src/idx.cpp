#include "rebias/biasgen.hpp"

#include <fstream>
#include <stdexcept>

namespace rebias::data {

namespace {

std::uint32_t read_be32(std::istream& is, const std::string& path) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw std::runtime_error("idx " + path + ": truncated header");
    return (static_cast<std::uint32_t>(b[0]) << 24) | (static_cast<std::uint32_t>(b[1]) << 16) |
           (static_cast<std::uint32_t>(b[2]) << 8) | b[3];
}

}  // namespace

SourceDigits load_idx(const std::string& images_path, const std::string& labels_path,
                      Split split) {
    std::ifstream imgs(images_path, std::ios::binary);
    if (!imgs) throw std::runtime_error("idx " + images_path + ": cannot open");
    std::ifstream lbls(labels_path, std::ios::binary);
    if (!lbls) throw std::runtime_error("idx " + labels_path + ": cannot open");

    const std::uint32_t img_magic = read_be32(imgs, images_path);
    if (img_magic != 0x00000803u)
        throw std::runtime_error("idx " + images_path + ": bad magic (expected 0x00000803)");
    const std::uint32_t n = read_be32(imgs, images_path);
    const std::uint32_t rows = read_be32(imgs, images_path);
    const std::uint32_t cols = read_be32(imgs, images_path);
    if (rows != kImageSide || cols != kImageSide)
        throw std::runtime_error("idx " + images_path + ": expected 28x28 images, got " +
                                 std::to_string(rows) + "x" + std::to_string(cols));

    const std::uint32_t lbl_magic = read_be32(lbls, labels_path);
    if (lbl_magic != 0x00000801u)
        throw std::runtime_error("idx " + labels_path + ": bad magic (expected 0x00000801)");
    const std::uint32_t nl = read_be32(lbls, labels_path);
    if (nl != n)
        throw std::runtime_error("idx " + labels_path + ": label count " + std::to_string(nl) +
                                 " does not match image count " + std::to_string(n));

    SourceDigits src;
    src.images.resize(n);
    src.labels.resize(n);
    src.indices.resize(n);
    const std::int64_t offset = split == Split::Train ? 0 : (std::int64_t{1} << 32);
    for (std::uint32_t i = 0; i < n; ++i) {
        if (!imgs.read(reinterpret_cast<char*>(src.images[i].data()), kImagePixels))
            throw std::runtime_error("idx " + images_path + ": truncated at image " +
                                     std::to_string(i));
        const int c = lbls.get();
        if (c < 0)
            throw std::runtime_error("idx " + labels_path + ": truncated at label " +
                                     std::to_string(i));
        if (c >= kNumClasses)
            throw std::runtime_error("idx " + labels_path + ": label " + std::to_string(c) +
                                     " out of range at index " + std::to_string(i));
        src.labels[i] = static_cast<std::uint8_t>(c);
        src.indices[i] = offset + i;
    }
    return src;
}

}  // namespace rebias::data
