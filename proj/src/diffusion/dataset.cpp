#include "latentmark/diffusion/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>

#include "latentmark/io/image_io.hpp"

namespace latentmark::diffusion {

namespace {

constexpr int kSize = 32;

struct Palette {
    float a[3], b[3];
};

// Two anchor colors per style, jittered per image.
const Palette kPalettes[4] = {
    {{0.85f, 0.35f, 0.15f}, {0.95f, 0.75f, 0.25f}},  // warm
    {{0.15f, 0.35f, 0.80f}, {0.25f, 0.80f, 0.90f}},  // cool
    {{0.15f, 0.65f, 0.30f}, {0.85f, 0.90f, 0.35f}},  // green-yellow
    {{0.55f, 0.20f, 0.75f}, {0.95f, 0.55f, 0.80f}},  // purple-pink
};

float clampf(float v, float lo, float hi) { return std::min(hi, std::max(lo, v)); }

Tensor make_image(int style, Rng& rng) {
    Tensor img({1, 3, kSize, kSize});
    Palette p = kPalettes[style % 4];
    for (int c = 0; c < 3; ++c) {
        p.a[c] = clampf(p.a[c] + float(rng.uniform(-0.08, 0.08)), 0.05f, 0.95f);
        p.b[c] = clampf(p.b[c] + float(rng.uniform(-0.08, 0.08)), 0.05f, 0.95f);
    }
    const double phase = rng.uniform(0.0, 2.0 * M_PI);
    const double freq = rng.uniform(1.0, 3.0);
    const double cx = rng.uniform(8.0, 24.0), cy = rng.uniform(8.0, 24.0);
    const int block = rng.bit() ? 4 : 8;

    for (int y = 0; y < kSize; ++y)
        for (int x = 0; x < kSize; ++x) {
            double m = 0.5;
            switch (style % 4) {
                case 0:  // horizontal stripes
                    m = 0.5 + 0.5 * std::sin(2.0 * M_PI * freq * y / kSize + phase);
                    break;
                case 1:  // checker blocks with a soft gradient
                    m = (((x / block) + (y / block)) % 2) ? 0.85 : 0.15;
                    m += 0.1 * std::sin(2.0 * M_PI * x / kSize + phase);
                    break;
                case 2: {  // concentric rings
                    const double r = std::hypot(x - cx, y - cy);
                    m = 0.5 + 0.5 * std::sin(2.0 * M_PI * freq * r / 16.0 + phase);
                    break;
                }
                default:  // diagonal waves
                    m = 0.5 + 0.5 * std::sin(2.0 * M_PI * freq * (x + y) / (2.0 * kSize) + phase);
                    break;
            }
            for (int c = 0; c < 3; ++c) {
                float v = float(p.a[c] * (1.0 - m) + p.b[c] * m);
                v += float(rng.uniform(-0.01, 0.01));
                img.at4(0, c, y, x) = clampf(v, 0.03f, 0.97f);
            }
        }
    return img.reshaped({3, kSize, kSize});
}

}  // namespace

Dataset synthesize_toy_dataset(int count, int n_styles, uint64_t seed) {
    if (count < 1) throw std::invalid_argument("synthesize_toy_dataset: count must be >= 1");
    if (n_styles < 1 || n_styles > 4)
        throw std::invalid_argument("synthesize_toy_dataset: styles must be in [1,4]");
    Rng rng(seed);
    Dataset ds;
    ds.n_styles = n_styles;
    ds.images.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        const int style = i % n_styles;
        ds.images.push_back(make_image(style, rng));
        ds.styles.push_back(style);
    }
    return ds;
}

Dataset load_image_directory(const std::string& dir, const std::string& index_file) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw std::runtime_error("not a directory: " + dir);
    std::map<std::string, int> style_of;
    int max_style = 0;
    if (!index_file.empty()) {
        std::ifstream f(index_file);
        if (!f) throw std::runtime_error("cannot open index file " + index_file);
        std::string line;
        while (std::getline(f, line)) {
            if (line.empty()) continue;
            const auto tab = line.find('\t');
            if (tab == std::string::npos)
                throw std::runtime_error("index file: expected 'filename<TAB>style': " + line);
            const int s = std::stoi(line.substr(tab + 1));
            if (s < 0) throw std::runtime_error("index file: negative style id");
            style_of[line.substr(0, tab)] = s;
            max_style = std::max(max_style, s);
        }
    }
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".png")
            files.push_back(entry.path().string());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw std::runtime_error("no PNG images in " + dir);

    Dataset ds;
    for (const auto& path : files) {
        Tensor img = io::read_png(path);
        if (img.dim(1) != kSize || img.dim(2) != kSize)
            throw std::runtime_error("image " + path + " is not 32x32");
        const std::string name = fs::path(path).filename().string();
        auto it = style_of.find(name);
        ds.styles.push_back(it == style_of.end() ? 0 : it->second);
        ds.images.push_back(std::move(img));
    }
    ds.n_styles = index_file.empty() ? 1 : max_style + 1;
    return ds;
}

void save_dataset_pngs(const Dataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream index(fs::path(dir) / "index.tsv");
    for (size_t i = 0; i < ds.images.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "img_%05zu.png", i);
        io::write_png((fs::path(dir) / name).string(), ds.images[i]);
        index << name << '\t' << ds.styles[i] << '\n';
    }
}

}  // namespace latentmark::diffusion
