#include "canlab/dataset.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "canlab/rng.hpp"

namespace canlab {

namespace {

struct Rgb {
    double r, g, b;
};

Rgb color_value(const std::string& name) {
    if (name == "red") return {0.90, 0.10, 0.10};
    if (name == "green") return {0.10, 0.80, 0.15};
    if (name == "blue") return {0.15, 0.25, 0.90};
    if (name == "yellow") return {0.95, 0.90, 0.10};
    if (name == "magenta") return {0.90, 0.10, 0.85};
    if (name == "cyan") return {0.10, 0.85, 0.90};
    if (name == "orange") return {0.95, 0.55, 0.10};
    if (name == "purple") return {0.55, 0.15, 0.80};
    if (name == "white") return {0.98, 0.98, 0.98};
    if (name == "pink") return {0.98, 0.60, 0.75};
    throw ConfigError("unknown color " + name);
}

bool inside_shape(const std::string& shape, double dx, double dy, double r) {
    const double ax = std::abs(dx), ay = std::abs(dy);
    const double d2 = dx * dx + dy * dy;
    if (shape == "circle") return d2 <= r * r;
    if (shape == "square") return ax <= 0.8 * r && ay <= 0.8 * r;
    if (shape == "triangle") return dy >= -r && dy <= r && ax <= (dy + r) * 0.5;
    if (shape == "cross") return (ax <= r / 3.0 || ay <= r / 3.0) && ax <= r && ay <= r;
    if (shape == "ring") return d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r);
    if (shape == "diamond") return ax + ay <= r;
    if (shape == "bar") return ay <= r / 3.0 && ax <= r;
    if (shape == "frame") {
        const double m = std::max(ax, ay);
        return m <= 0.9 * r && m >= 0.55 * r;
    }
    if (shape == "dot") return d2 <= (0.45 * r) * (0.45 * r);
    if (shape == "checker") {
        if (ax > 0.9 * r || ay > 0.9 * r) return false;
        const int ix = static_cast<int>(std::floor((dx + r) / (r * 0.45)));
        const int iy = static_cast<int>(std::floor((dy + r) / (r * 0.45)));
        return (ix + iy) % 2 == 0;
    }
    throw ConfigError("unknown shape " + shape);
}

double quantize(double v) {
    v = std::min(1.0, std::max(0.0, v));
    return std::round(v * 255.0) / 255.0;
}

std::string split_name(Split s) { return s == Split::rank ? "rank" : "validation"; }

Split split_from(const std::string& s) {
    if (s == "rank") return Split::rank;
    if (s == "validation") return Split::validation;
    throw InputError("unknown split " + s);
}

} // namespace

const std::vector<CategorySpec>& categories() {
    static const std::vector<CategorySpec> cats = {
        {"red", "circle"},   {"green", "square"}, {"blue", "triangle"},
        {"yellow", "cross"}, {"magenta", "ring"}, {"cyan", "diamond"},
        {"orange", "bar"},   {"purple", "frame"}, {"white", "dot"},
        {"pink", "checker"},
    };
    return cats;
}

int category_index(const std::string& label) {
    const auto& cats = categories();
    for (std::size_t i = 0; i < cats.size(); ++i)
        if (cats[i].label() == label) return static_cast<int>(i);
    return -1;
}

std::vector<SyntheticSample> gen_dataset(int n_per_category, std::uint64_t seed,
                                         std::size_t image_size) {
    if (n_per_category < 1) throw InputError("n_per_category must be >= 1");
    const auto& cats = categories();
    std::vector<SyntheticSample> out;
    out.reserve(cats.size() * static_cast<std::size_t>(n_per_category));
    const auto sz = static_cast<double>(image_size);
    for (std::size_t c = 0; c < cats.size(); ++c) {
        const Rgb col = color_value(cats[c].color);
        for (int j = 0; j < n_per_category; ++j) {
            Rng rng(seed * 1000003ULL + c * 1009ULL + static_cast<std::uint64_t>(j));
            SyntheticSample s;
            s.image_size = image_size;
            s.pixels.resize(image_size * image_size * 3);
            s.caption = cats[c].caption();
            s.category = static_cast<int>(c);
            s.split = (j % 3 == 2) ? Split::validation : Split::rank;
            s.name = cats[c].label() + "_" + std::to_string(j);
            const double cx = sz * rng.uniform(0.40, 0.60);
            const double cy = sz * rng.uniform(0.40, 0.60);
            const double r = sz * rng.uniform(0.25, 0.38);
            for (std::size_t y = 0; y < image_size; ++y)
                for (std::size_t x = 0; x < image_size; ++x) {
                    const std::size_t p = (y * image_size + x) * 3;
                    const double bg = rng.uniform(0.48, 0.52);
                    double pr = bg, pg = bg, pb = bg;
                    if (inside_shape(cats[c].shape, static_cast<double>(x) - cx,
                                     static_cast<double>(y) - cy, r)) {
                        pr = col.r;
                        pg = col.g;
                        pb = col.b;
                    }
                    s.pixels[p] = quantize(pr);
                    s.pixels[p + 1] = quantize(pg);
                    s.pixels[p + 2] = quantize(pb);
                }
            out.push_back(std::move(s));
        }
    }
    return out;
}

void save_dataset(const std::vector<SyntheticSample>& samples,
                  const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream manifest(dir / "manifest.csv", std::ios::binary);
    manifest << "file,caption,category,split\n";
    for (const auto& s : samples) {
        const std::string base = s.name;
        std::ofstream ppm(dir / (base + ".ppm"), std::ios::binary);
        ppm << "P6\n" << s.image_size << " " << s.image_size << "\n255\n";
        for (double v : s.pixels)
            ppm.put(static_cast<char>(static_cast<unsigned char>(
                std::lround(v * 255.0))));
        std::ofstream cap(dir / (base + ".txt"), std::ios::binary);
        cap << s.caption << "\n";
        manifest << base << ".ppm," << s.caption << ","
                 << categories()[static_cast<std::size_t>(s.category)].label() << ","
                 << split_name(s.split) << "\n";
    }
}

std::vector<double> load_ppm(const std::filesystem::path& file, std::size_t& size_out) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw DependencyError("missing image file " + file.string());
    std::string magic;
    std::size_t w = 0, h = 0;
    int maxval = 0;
    in >> magic >> w >> h >> maxval;
    if (magic != "P6" || maxval != 255 || w != h)
        throw InputError("unsupported ppm " + file.string());
    in.get();
    std::vector<double> px(w * h * 3);
    for (auto& v : px) {
        const int c = in.get();
        if (c < 0) throw InputError("truncated ppm " + file.string());
        v = static_cast<double>(c) / 255.0;
    }
    size_out = w;
    return px;
}

std::vector<SyntheticSample> load_dataset(const std::filesystem::path& dir) {
    std::ifstream manifest(dir / "manifest.csv");
    if (!manifest) throw DependencyError("missing manifest " + (dir / "manifest.csv").string());
    std::string line;
    std::getline(manifest, line); // header
    std::vector<SyntheticSample> out;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string f;
        while (std::getline(ss, f, ',')) fields.push_back(f);
        if (fields.size() != 4) throw InputError("bad manifest row: " + line);
        SyntheticSample s;
        s.pixels = load_ppm(dir / fields[0], s.image_size);
        s.caption = fields[1];
        const int cat = category_index(fields[2]);
        if (cat < 0) throw InputError("unknown category " + fields[2]);
        s.category = cat;
        s.split = split_from(fields[3]);
        s.name = fields[0].substr(0, fields[0].size() - 4);
        out.push_back(std::move(s));
    }
    return out;
}

} // namespace canlab
