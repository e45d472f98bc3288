#pragma once

// Synthetic captioned shapes, image-folder loading, and deterministic
// batching.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "layerdiff/image_io.hpp"
#include "layerdiff/model_config.hpp"
#include "layerdiff/noise.hpp"
#include "layerdiff/numerics/tensor.hpp"
#include "layerdiff/rng.hpp"

namespace layerdiff {

class DataError : public std::runtime_error {
public:
    explicit DataError(std::vector<std::string> items)
        : std::runtime_error(join(items)), items_(std::move(items)) {}
    const std::vector<std::string>& items() const { return items_; }

private:
    static std::string join(const std::vector<std::string>& items) {
        std::string s = std::to_string(items.size()) + " data error(s):";
        for (const auto& i : items) s += "\n  " + i;
        return s;
    }
    std::vector<std::string> items_;
};

inline constexpr std::array<const char*, 6> kColors{"red", "green", "blue", "yellow", "white", "black"};
inline constexpr std::array<const char*, 3> kShapes{"circle", "square", "triangle"};
inline constexpr std::array<const char*, 5> kPositions{"left", "right", "top", "bottom", "center"};

/// Fixed word list. Ids: 0 pad, 1 unknown, then colours, shapes, positions.
class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kUnknown = 1;

    static const std::vector<std::string>& words() {
        static const std::vector<std::string> w = [] {
            std::vector<std::string> v{"<pad>", "<unk>"};
            for (auto c : kColors) v.emplace_back(c);
            for (auto s : kShapes) v.emplace_back(s);
            for (auto p : kPositions) v.emplace_back(p);
            return v;
        }();
        return w;
    }
    static int size() { return static_cast<int>(words().size()); }

    static int id(const std::string& word) {
        const auto& w = words();
        for (std::size_t i = 2; i < w.size(); ++i) {
            if (w[i] == word) return static_cast<int>(i);
        }
        return kUnknown;
    }

    /// Lower-cases and splits on whitespace and commas.
    static std::vector<int> tokenize(const std::string& caption) {
        std::vector<int> ids;
        std::string cur;
        auto flush = [&] {
            if (!cur.empty()) ids.push_back(id(cur));
            cur.clear();
        };
        for (char ch : caption) {
            if (std::isspace(static_cast<unsigned char>(ch)) || ch == ',') {
                flush();
            } else {
                cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
            }
        }
        flush();
        return ids;
    }
};

struct ShapeParams {
    int color = 0;
    int shape = 0;
    int position = 0;
    bool operator==(const ShapeParams&) const = default;
};

/// One or two shapes at distinct positions, ordered by position index.
struct SceneParams {
    std::vector<ShapeParams> shapes;
    bool operator==(const SceneParams&) const = default;
};

inline std::string caption_of(const SceneParams& scene) {
    std::string s;
    for (std::size_t i = 0; i < scene.shapes.size(); ++i) {
        const auto& p = scene.shapes[i];
        if (i) s += ", ";
        s += std::string(kColors[static_cast<std::size_t>(p.color)]) + " " + kShapes[static_cast<std::size_t>(p.shape)] +
             " " + kPositions[static_cast<std::size_t>(p.position)];
    }
    return s;
}

/// Inverse of caption_of. Throws std::invalid_argument on captions outside
/// the generator's grammar.
inline SceneParams parse_caption(const std::string& caption) {
    auto index_of = [](const auto& table, const std::string& w) {
        for (std::size_t i = 0; i < table.size(); ++i) {
            if (w == table[i]) return static_cast<int>(i);
        }
        return -1;
    };
    SceneParams scene;
    std::stringstream ss(caption);
    std::string part;
    while (std::getline(ss, part, ',')) {
        std::istringstream words(part);
        std::string c, s, p, extra;
        if (!(words >> c >> s >> p) || (words >> extra)) {
            throw std::invalid_argument("caption '" + caption + "': expected 'color shape position' groups");
        }
        ShapeParams sp{index_of(kColors, c), index_of(kShapes, s), index_of(kPositions, p)};
        if (sp.color < 0 || sp.shape < 0 || sp.position < 0) {
            throw std::invalid_argument("caption '" + caption + "': unknown word in '" + part + "'");
        }
        scene.shapes.push_back(sp);
    }
    if (scene.shapes.empty() || scene.shapes.size() > 2) {
        throw std::invalid_argument("caption '" + caption + "': expected one or two shapes");
    }
    if (scene.shapes.size() == 2 && !(scene.shapes[0].position < scene.shapes[1].position)) {
        throw std::invalid_argument("caption '" + caption + "': positions must be distinct and in canonical order");
    }
    return scene;
}

inline std::array<double, 3> color_rgb(int color) {
    static constexpr std::array<std::array<double, 3>, 6> table{
        {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0}, {1, 1, 1}, {0, 0, 0}}};
    return table[static_cast<std::size_t>(color)];
}

inline constexpr double kBackground = 0.5;  // in [0, 1] units
inline constexpr double kShapeRadius = 0.11;  // fraction of the image side

/// Position anchors (x, y) as fractions of the image side.
inline std::array<double, 2> position_anchor(int position) {
    static constexpr std::array<std::array<double, 2>, 5> table{
        {{0.25, 0.5}, {0.75, 0.5}, {0.5, 0.25}, {0.5, 0.75}, {0.5, 0.5}}};
    return table[static_cast<std::size_t>(position)];
}

/// Placement jitter drawn per shape; zero jitter gives the canonical layout.
struct Placement {
    double dx = 0, dy = 0;  // fractions of the image side
    double scale = 1.0;
};

namespace detail {

inline bool inside_shape(int shape, double px, double py, double cx, double cy, double r) {
    const double dx = px - cx, dy = py - cy;
    switch (shape) {
        case 0:
            return dx * dx + dy * dy <= r * r;
        case 1:
            return std::max(std::abs(dx), std::abs(dy)) <= 0.886 * r;
        default: {
            // upward triangle inscribed in the circle of radius r
            const double ax = cx, ay = cy - r;
            const double bx = cx - 0.866 * r, by = cy + 0.5 * r;
            const double qx = cx + 0.866 * r, qy = cy + 0.5 * r;
            auto edge = [&](double x0, double y0, double x1, double y1) {
                return (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
            };
            const double e0 = edge(ax, ay, bx, by), e1 = edge(bx, by, qx, qy), e2 = edge(qx, qy, ax, ay);
            return (e0 <= 0 && e1 <= 0 && e2 <= 0) || (e0 >= 0 && e1 >= 0 && e2 >= 0);
        }
    }
}

}  // namespace detail

/// Renders a scene in [-1, 1] with 4x4 supersampled coverage.
template <typename T>
Tensor<T> render_scene(const SceneParams& scene, int resolution, const std::vector<Placement>& placement = {}) {
    std::vector<double> rgb(static_cast<std::size_t>(3 * resolution * resolution), kBackground);
    constexpr int ss = 4;
    for (std::size_t i = 0; i < scene.shapes.size(); ++i) {
        const auto& sp = scene.shapes[i];
        const Placement pl = i < placement.size() ? placement[i] : Placement{};
        const auto anchor = position_anchor(sp.position);
        const double cx = (anchor[0] + pl.dx) * resolution, cy = (anchor[1] + pl.dy) * resolution;
        const double r = kShapeRadius * pl.scale * resolution;
        const auto col = color_rgb(sp.color);
        const int y0 = std::max(0, static_cast<int>(std::floor(cy - r - 1)));
        const int y1 = std::min(resolution - 1, static_cast<int>(std::ceil(cy + r + 1)));
        const int x0 = std::max(0, static_cast<int>(std::floor(cx - r - 1)));
        const int x1 = std::min(resolution - 1, static_cast<int>(std::ceil(cx + r + 1)));
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                int hits = 0;
                for (int sy = 0; sy < ss; ++sy)
                    for (int sx = 0; sx < ss; ++sx)
                        hits += detail::inside_shape(sp.shape, x + (sx + 0.5) / ss, y + (sy + 0.5) / ss, cx, cy, r);
                if (!hits) continue;
                const double cov = hits / double(ss * ss);
                for (int c = 0; c < 3; ++c) {
                    auto& v = rgb[static_cast<std::size_t>((c * resolution + y) * resolution + x)];
                    v = v * (1 - cov) + col[static_cast<std::size_t>(c)] * cov;
                }
            }
        }
    }
    Tensor<T> out(Shape{3, resolution, resolution});
    for (std::size_t i = 0; i < rgb.size(); ++i) out[i] = static_cast<T>(rgb[i] * 2.0 - 1.0);
    return out;
}

template <typename T>
struct Example {
    Tensor<T> image;  // [3,H,W] in [-1, 1]
    std::string caption;
    std::vector<int> tokens;
};

template <typename T>
using Dataset = std::vector<Example<T>>;

inline void validate_resolution(int resolution) {
    if (resolution < 16 || !is_power_of_two(resolution)) {
        throw ConfigError("resolution must be a power of two >= 16, got " + std::to_string(resolution));
    }
}

/// Random scene for example `index`; a pure function of (seed, index).
inline std::pair<SceneParams, std::vector<Placement>> random_scene(std::uint64_t seed, std::uint64_t index) {
    Rng rng(derive_seed(seed, index));
    SceneParams scene;
    const int count = 1 + static_cast<int>(rng.below(2));
    int first = static_cast<int>(rng.below(kPositions.size()));
    std::vector<int> positions{first};
    if (count == 2) {
        int second = static_cast<int>(rng.below(kPositions.size() - 1));
        if (second >= first) ++second;
        positions.push_back(second);
        std::sort(positions.begin(), positions.end());
    }
    std::vector<Placement> placement;
    for (int p : positions) {
        scene.shapes.push_back(ShapeParams{static_cast<int>(rng.below(kColors.size())),
                                           static_cast<int>(rng.below(kShapes.size())), p});
        placement.push_back(Placement{rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.02), rng.uniform(0.9, 1.05)});
    }
    return {scene, placement};
}

template <typename T>
Example<T> make_example(const SceneParams& scene, int resolution, const std::vector<Placement>& placement = {}) {
    Example<T> ex{render_scene<T>(scene, resolution, placement), caption_of(scene), {}};
    ex.tokens = Vocabulary::tokenize(ex.caption);
    return ex;
}

template <typename T>
Dataset<T> generate_shapes(int n, int resolution, std::uint64_t seed) {
    validate_resolution(resolution);
    if (n < 0) throw ConfigError("generate_shapes: n must be non-negative");
    Dataset<T> ds;
    ds.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const auto [scene, placement] = random_scene(seed, static_cast<std::uint64_t>(i));
        ds.push_back(make_example<T>(scene, resolution, placement));
    }
    return ds;
}

/// Reads "filename<TAB>caption" lines; filenames resolve against `dir`.
/// All problems are collected and reported together.
template <typename T>
Dataset<T> load_folder(const std::filesystem::path& dir, const std::filesystem::path& captions_file, int resolution) {
    std::ifstream is(captions_file);
    if (!is) throw DataError({captions_file.string() + ": cannot open captions file"});
    Dataset<T> ds;
    std::vector<std::string> errors;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        const std::string where = captions_file.string() + ":" + std::to_string(lineno);
        if (tab == std::string::npos) {
            errors.push_back(where + ": expected filename<TAB>caption");
            continue;
        }
        const auto file = dir / line.substr(0, tab);
        const std::string caption = line.substr(tab + 1);
        if (!std::filesystem::exists(file)) {
            errors.push_back(where + ": caption refers to missing image " + file.string());
            continue;
        }
        try {
            const auto img = from_rgb8<T>(read_png(file.string()));
            Example<T> ex{resize_bilinear(img, resolution, resolution), caption, Vocabulary::tokenize(caption)};
            ds.push_back(std::move(ex));
        } catch (const std::exception& e) {
            errors.push_back(where + ": cannot decode image: " + e.what());
        }
    }
    if (!errors.empty()) throw DataError(std::move(errors));
    return ds;
}

/// Batches of dataset indices for one epoch; the shuffle is a pure function
/// of (seed, epoch) and the final partial batch is kept.
inline std::vector<std::vector<std::size_t>> batch_iter(std::size_t dataset_size, std::size_t batch_size,
                                                        std::uint64_t seed, std::uint64_t epoch) {
    if (batch_size < 1) throw std::invalid_argument("batch_iter: batch_size must be >= 1");
    std::vector<std::size_t> order(dataset_size);
    for (std::size_t i = 0; i < dataset_size; ++i) order[i] = i;
    Rng rng(derive_seed(derive_seed(seed, "batch_iter"), epoch));
    for (std::size_t i = dataset_size; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t s = 0; s < dataset_size; s += batch_size) {
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                             order.begin() + static_cast<std::ptrdiff_t>(std::min(dataset_size, s + batch_size)));
    }
    return batches;
}

inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

/// Writes NNNNNN.png files, captions.tsv and manifest.json; returns the
/// manifest hash (FNV-1a over every written image and caption byte).
template <typename T>
std::string write_dataset(const Dataset<T>& ds, const std::filesystem::path& dir, const json& extra_meta = {}) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw DataError({dir.string() + ": cannot create directory: " + ec.message()});
    std::ofstream captions(dir / "captions.tsv");
    if (!captions) throw DataError({(dir / "captions.tsv").string() + ": cannot open for writing"});
    std::uint64_t hash = 0xcbf29ce484222325ULL;
    json files = json::array();
    for (std::size_t i = 0; i < ds.size(); ++i) {
        std::ostringstream name;
        name << std::setw(6) << std::setfill('0') << i << ".png";
        const auto rgb = to_rgb8(ds[i].image);
        write_png((dir / name.str()).string(), rgb);
        hash = fnv1a(rgb.pixels.data(), rgb.pixels.size(), hash);
        hash = fnv1a(ds[i].caption.data(), ds[i].caption.size(), hash);
        captions << name.str() << '\t' << ds[i].caption << '\n';
        files.push_back(name.str());
    }
    if (!captions) throw DataError({(dir / "captions.tsv").string() + ": write failed"});
    json manifest{{"count", ds.size()}, {"hash", hex64(hash)}, {"files", files}};
    if (!ds.empty()) manifest["resolution"] = ds.front().image.dim(1);
    for (const auto& [k, v] : extra_meta.items()) manifest[k] = v;
    std::ofstream mf(dir / "manifest.json");
    mf << manifest.dump(2) << '\n';
    if (!mf) throw DataError({(dir / "manifest.json").string() + ": write failed"});
    return hex64(hash);
}

/// Stacks the selected examples into [N,3,H,W] images plus token lists.
template <typename T>
std::pair<Tensor<T>, std::vector<std::vector<int>>> collate(const Dataset<T>& ds, const std::vector<std::size_t>& idx) {
    std::vector<Tensor<T>> images;
    std::vector<std::vector<int>> tokens;
    for (auto i : idx) {
        images.push_back(ds.at(i).image);
        tokens.push_back(ds.at(i).tokens);
    }
    return {stack<T>(images), std::move(tokens)};
}

}  // namespace layerdiff
