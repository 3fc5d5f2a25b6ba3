#include "latentmark/io/image_io.hpp"

#include <jpeglib.h>
#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <stdexcept>

namespace latentmark::io {

namespace {

uint8_t to_byte(float v) {
    const float c = std::min(1.0f, std::max(0.0f, v));
    return uint8_t(std::lround(c * 255.0f));
}

void check_image(const Tensor& img) {
    if (img.rank() != 3 || img.dim(0) != 3)
        throw std::invalid_argument("image io: expects [3,H,W], got " + img.shape_str());
}

std::vector<uint8_t> interleave(const Tensor& img) {
    const int H = img.dim(1), W = img.dim(2);
    std::vector<uint8_t> rgb(size_t(H) * W * 3);
    const int64_t hw = int64_t(H) * W;
    for (int64_t i = 0; i < hw; ++i) {
        rgb[size_t(3 * i)] = to_byte(img[i]);
        rgb[size_t(3 * i + 1)] = to_byte(img[hw + i]);
        rgb[size_t(3 * i + 2)] = to_byte(img[2 * hw + i]);
    }
    return rgb;
}

Tensor planarize(const uint8_t* rgb, int H, int W) {
    Tensor img({3, H, W});
    const int64_t hw = int64_t(H) * W;
    for (int64_t i = 0; i < hw; ++i) {
        img[i] = rgb[3 * i] / 255.0f;
        img[hw + i] = rgb[3 * i + 1] / 255.0f;
        img[2 * hw + i] = rgb[3 * i + 2] / 255.0f;
    }
    return img;
}

}  // namespace

void write_png(const std::string& path, const Tensor& image) {
    check_image(image);
    const int H = image.dim(1), W = image.dim(2);
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw std::runtime_error("cannot create " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        std::fclose(fp);
        throw std::runtime_error("png write failed for " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, png_uint_32(W), png_uint_32(H), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<uint8_t> rgb = interleave(image);
    for (int y = 0; y < H; ++y) png_write_row(png, rgb.data() + size_t(y) * W * 3);
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

Tensor read_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw std::runtime_error("cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        std::fclose(fp);
        throw std::runtime_error("png read failed for " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    // normalize to 8-bit RGB
    png_set_strip_16(png);
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
    if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY ||
        png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    const int H = int(png_get_image_height(png, info));
    const int W = int(png_get_image_width(png, info));
    if (png_get_rowbytes(png, info) != size_t(W) * 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw std::runtime_error("png read: unexpected row layout in " + path);
    }
    std::vector<uint8_t> rgb(size_t(H) * W * 3);
    for (int y = 0; y < H; ++y) png_read_row(png, rgb.data() + size_t(y) * W * 3, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return planarize(rgb.data(), H, W);
}

namespace {
struct JpegErrorMgr {
    jpeg_error_mgr pub;
    std::jmp_buf setjmp_buffer;
};

void jpeg_error_exit(j_common_ptr cinfo) {
    auto* err = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
    std::longjmp(err->setjmp_buffer, 1);
}
}  // namespace

std::vector<uint8_t> encode_jpeg(const Tensor& image, int quality) {
    check_image(image);
    if (quality < 1 || quality > 100)
        throw std::invalid_argument("encode_jpeg: quality must be in [1,100]");
    const int H = image.dim(1), W = image.dim(2);
    std::vector<uint8_t> rgb = interleave(image);

    jpeg_compress_struct cinfo;
    JpegErrorMgr jerr;
    cinfo.err = jpeg_std_error(&jerr.pub);
    jerr.pub.error_exit = jpeg_error_exit;
    unsigned char* buf = nullptr;
    unsigned long buflen = 0;
    if (setjmp(jerr.setjmp_buffer)) {
        jpeg_destroy_compress(&cinfo);
        if (buf) free(buf);
        throw std::runtime_error("jpeg encode failed");
    }
    jpeg_create_compress(&cinfo);
    jpeg_mem_dest(&cinfo, &buf, &buflen);
    cinfo.image_width = JDIMENSION(W);
    cinfo.image_height = JDIMENSION(H);
    cinfo.input_components = 3;
    cinfo.in_color_space = JCS_RGB;
    jpeg_set_defaults(&cinfo);
    jpeg_set_quality(&cinfo, quality, TRUE);
    jpeg_start_compress(&cinfo, TRUE);
    while (cinfo.next_scanline < cinfo.image_height) {
        JSAMPROW row = rgb.data() + size_t(cinfo.next_scanline) * W * 3;
        jpeg_write_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_compress(&cinfo);
    std::vector<uint8_t> out(buf, buf + buflen);
    jpeg_destroy_compress(&cinfo);
    free(buf);
    return out;
}

Tensor decode_jpeg(const std::vector<uint8_t>& bytes) {
    jpeg_decompress_struct cinfo;
    JpegErrorMgr jerr;
    cinfo.err = jpeg_std_error(&jerr.pub);
    jerr.pub.error_exit = jpeg_error_exit;
    if (setjmp(jerr.setjmp_buffer)) {
        jpeg_destroy_decompress(&cinfo);
        throw std::runtime_error("jpeg decode failed");
    }
    jpeg_create_decompress(&cinfo);
    jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);
    const int H = int(cinfo.output_height), W = int(cinfo.output_width);
    std::vector<uint8_t> rgb(size_t(H) * W * 3);
    while (cinfo.output_scanline < cinfo.output_height) {
        JSAMPROW row = rgb.data() + size_t(cinfo.output_scanline) * W * 3;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return planarize(rgb.data(), H, W);
}

Tensor jpeg_roundtrip(const Tensor& image, int quality) {
    return decode_jpeg(encode_jpeg(image, quality));
}

}  // namespace latentmark::io
