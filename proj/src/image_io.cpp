#include "refkv/image_io.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace refkv {

void save_ppm(const RgbImage& img, const std::string& path) {
    if (int(img.rgb.size()) != img.width * img.height * 3)
        throw std::invalid_argument("save_ppm: pixel buffer does not match extents");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os << "P6\n" << img.width << " " << img.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.rgb.data()), std::streamsize(img.rgb.size()));
    if (!os) throw std::runtime_error("short write to " + path);
}

namespace {
int read_ppm_int(std::istream& is, const std::string& path) {
    // skips whitespace and '#' comments per the PPM grammar
    int c = is.get();
    while (c == '#' || std::isspace(c)) {
        if (c == '#')
            while (c != '\n' && c != EOF) c = is.get();
        c = is.get();
    }
    if (c == EOF) throw std::runtime_error(path + ": truncated PPM header");
    int v = 0;
    while (std::isdigit(c)) {
        v = v * 10 + (c - '0');
        c = is.get();
    }
    return v;
}
}  // namespace

RgbImage load_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    char magic[2];
    is.read(magic, 2);
    if (!is || magic[0] != 'P' || magic[1] != '6')
        throw std::runtime_error(path + ": not a binary PPM (P6) file");
    RgbImage img;
    img.width = read_ppm_int(is, path);
    img.height = read_ppm_int(is, path);
    int maxval = read_ppm_int(is, path);
    if (maxval != 255) throw std::runtime_error(path + ": only maxval 255 supported");
    if (img.width < 1 || img.height < 1) throw std::runtime_error(path + ": bad extents");
    img.rgb.resize(size_t(img.width) * size_t(img.height) * 3);
    is.read(reinterpret_cast<char*>(img.rgb.data()), std::streamsize(img.rgb.size()));
    if (!is) throw std::runtime_error(path + ": truncated pixel data");
    return img;
}

RgbImage tensor_to_rgb8(const Tensor& img01) {
    if (img01.rank() != 3 || img01.dim(0) != 3)
        tensor_error("tensor_to_rgb8: expected 3×H×W, got " + shape_str(img01.shape()));
    RgbImage out;
    out.height = int(img01.dim(1));
    out.width = int(img01.dim(2));
    out.rgb.resize(size_t(out.width) * size_t(out.height) * 3);
    int64_t plane = img01.dim(1) * img01.dim(2);
    for (int64_t i = 0; i < plane; ++i)
        for (int c = 0; c < 3; ++c) {
            double v = std::lround(std::fmin(1.0, std::fmax(0.0, double(img01.data()[c * plane + i]))) * 255.0);
            out.rgb[size_t(i * 3 + c)] = uint8_t(v);
        }
    return out;
}

Tensor rgb8_to_tensor(const RgbImage& img) {
    Tensor out = Tensor::zeros({3, img.height, img.width});
    int64_t plane = int64_t(img.height) * img.width;
    for (int64_t i = 0; i < plane; ++i)
        for (int c = 0; c < 3; ++c)
            out.data()[c * plane + i] = float(img.rgb[size_t(i * 3 + c)] / 255.0);
    return out;
}

void save_image01(const Tensor& img01, const std::string& path) {
    save_ppm(tensor_to_rgb8(img01), path);
}

Tensor load_image01(const std::string& path) { return rgb8_to_tensor(load_ppm(path)); }

}  // namespace refkv
