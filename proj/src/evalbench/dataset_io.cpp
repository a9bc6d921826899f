#include "hflow/evalbench/dataset_io.hpp"

#include "hflow/numerics/archive.hpp"
#include "hflow/numerics/error.hpp"
#include "hflow/numerics/text.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace hflow::eval {

namespace fs = std::filesystem;

void write_pgm(const fs::path& path, const Tensor& image) {
    num::require_rank(image, 4, "write_pgm");
    if (image.n() != 1 || image.c() != 1)
        throw ContractError("write_pgm: expected one 1 x 1 x H x W image, got " + num::shape_string(image.shape()));
    const std::string header = "P5\n" + std::to_string(image.w()) + " " + std::to_string(image.h()) + "\n255\n";
    std::vector<std::uint8_t> bytes(header.begin(), header.end());
    for (double v : image.values()) {
        if (!(v >= 0.0 && v <= 255.0) || v != std::floor(v))
            throw ContractError("write_pgm: " + path.string() + ": value " + std::to_string(v) +
                                " is not an integer level in [0, 255]");
        bytes.push_back(static_cast<std::uint8_t>(v));
    }
    num::write_file_atomic(path, bytes);
}

Tensor read_pgm(const fs::path& path) {
    const std::vector<std::uint8_t> bytes = num::read_file_bytes(path);
    std::size_t pos = 0;
    const auto fail = [&](const std::string& why) { return ContractError("read_pgm: " + path.string() + ": " + why); };
    // Header tokens separated by whitespace, '#' comments to end of line.
    const auto token = [&]() {
        for (;;) {
            while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
            if (pos < bytes.size() && bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
                continue;
            }
            break;
        }
        std::string t;
        while (pos < bytes.size() && !std::isspace(bytes[pos])) t.push_back(static_cast<char>(bytes[pos++]));
        if (t.empty()) throw fail("truncated header");
        return t;
    };
    if (token() != "P5") throw fail("not a binary PGM (P5)");
    const std::size_t w = num::parse_uint(token(), "PGM width");
    const std::size_t h = num::parse_uint(token(), "PGM height");
    const std::size_t maxval = num::parse_uint(token(), "PGM maxval");
    if (maxval != 255) throw fail("only 8-bit PGM (maxval 255) is supported");
    ++pos; // single whitespace before the raster
    if (bytes.size() < pos + w * h) throw fail("raster truncated");
    Tensor out = Tensor::nchw(1, 1, h, w);
    for (std::size_t i = 0; i < w * h; ++i) out[i] = bytes[pos + i];
    return out;
}

namespace {

std::string join(const std::vector<double>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + num::format_double(v[i]);
    return s;
}

std::string image_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%04zu.pgm", i);
    return buf;
}

} // namespace

void save_dataset(const PhantomDataset& ds, const fs::path& dir) {
    fs::create_directories(dir);
    std::ostringstream m;
    m << "format=hflow-phantom-1\n";
    m << "size=" << ds.spec.size << "\n";
    m << "classes=" << ds.spec.classes << "\n";
    std::vector<double> bands;
    for (const Band& b : ds.spec.resolved_bands()) {
        bands.push_back(b.lo);
        bands.push_back(b.hi);
    }
    m << "bands=" << join(bands) << "\n";
    m << "smoothing-sigma=" << num::format_double(ds.spec.smoothing_sigma) << "\n";
    m << "noise-sigma=" << num::format_double(ds.spec.noise_sigma) << "\n";
    m << "seed=" << ds.seed << "\n";
    std::string names;
    for (const SiteData& s : ds.sites) names += (names.empty() ? "" : ",") + s.transform.name;
    m << "sites=" << names << "\n";
    for (const SiteData& s : ds.sites) {
        const std::string p = "site." + s.transform.name + ".";
        m << p << "count=" << s.images.n() << "\n";
        m << p << "map-inputs=" << join(s.transform.map.inputs) << "\n";
        m << p << "map-outputs=" << join(s.transform.map.outputs) << "\n";
        m << p << "noise-sigma=" << num::format_double(s.transform.noise_sigma) << "\n";
        m << p << "bias-amplitude=" << num::format_double(s.transform.bias_amplitude) << "\n";
        const aug::Lut lut = s.transform.map.to_lut();
        m << p << "lut=";
        for (std::size_t i = 0; i < 256; ++i) m << (i ? "," : "") << static_cast<int>(lut[i]);
        m << "\n" << p << "split=";
        for (std::size_t i = 0; i < s.split.size(); ++i) m << (i ? "," : "") << split_name(s.split[i]);
        m << "\n";
        fs::create_directories(dir / s.transform.name / "images");
        fs::create_directories(dir / s.transform.name / "masks");
        for (std::size_t i = 0; i < s.images.n(); ++i) {
            write_pgm(dir / s.transform.name / "images" / image_name(i), num::slice_batch(s.images, i, i + 1));
            write_pgm(dir / s.transform.name / "masks" / image_name(i), num::slice_batch(s.masks, i, i + 1));
        }
    }
    num::write_text_atomic(dir / "manifest.txt", m.str());
}

PhantomDataset load_dataset(const fs::path& dir) {
    const fs::path mpath = dir / "manifest.txt";
    std::ifstream in(mpath);
    if (!in) throw ContractError("dataset manifest not found: " + mpath.string());
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(in, line)) {
        line = num::trim(line);
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ContractError(mpath.string() + ": malformed line '" + line + "'");
        kv[num::trim(line.substr(0, eq))] = num::trim(line.substr(eq + 1));
    }
    const auto get = [&](const std::string& key) -> const std::string& {
        auto it = kv.find(key);
        if (it == kv.end()) throw ContractError(mpath.string() + ": missing key '" + key + "'");
        return it->second;
    };
    if (get("format") != "hflow-phantom-1") throw ContractError(mpath.string() + ": unsupported format " + get("format"));
    PhantomDataset ds;
    ds.spec.size = num::parse_uint(get("size"), "size");
    ds.spec.classes = num::parse_uint(get("classes"), "classes");
    const auto bands = num::parse_doubles(get("bands"), "bands");
    if (bands.size() != 2 * ds.spec.classes) throw ContractError(mpath.string() + ": bands need 2 values per class");
    for (std::size_t k = 0; k < ds.spec.classes; ++k) ds.spec.bands.push_back({bands[2 * k], bands[2 * k + 1]});
    ds.spec.smoothing_sigma = num::parse_double(get("smoothing-sigma"), "smoothing-sigma");
    ds.spec.noise_sigma = num::parse_double(get("noise-sigma"), "noise-sigma");
    ds.spec.validate();
    ds.seed = num::parse_uint(get("seed"), "seed");
    for (const std::string& name : num::split(get("sites"), ',')) {
        const std::string p = "site." + name + ".";
        SiteData s;
        s.transform.name = name;
        s.transform.map.inputs = num::parse_doubles(get(p + "map-inputs"), p + "map-inputs");
        s.transform.map.outputs = num::parse_doubles(get(p + "map-outputs"), p + "map-outputs");
        s.transform.noise_sigma = num::parse_double(get(p + "noise-sigma"), p + "noise-sigma");
        s.transform.bias_amplitude = num::parse_double(get(p + "bias-amplitude"), p + "bias-amplitude");
        s.transform.validate();
        const std::size_t n = num::parse_uint(get(p + "count"), p + "count");
        const auto splits = num::split(get(p + "split"), ',');
        if (splits.size() != n) throw ContractError(mpath.string() + ": " + p + "split has the wrong length");
        for (const auto& sp : splits) s.split.push_back(split_from_name(sp));
        std::vector<Tensor> imgs, masks;
        for (std::size_t i = 0; i < n; ++i) {
            imgs.push_back(read_pgm(dir / name / "images" / image_name(i)));
            masks.push_back(read_pgm(dir / name / "masks" / image_name(i)));
            if (imgs.back().h() != ds.spec.size || imgs.back().w() != ds.spec.size)
                throw ContractError("dataset image " + (dir / name / "images" / image_name(i)).string() +
                                    " does not match size " + std::to_string(ds.spec.size));
        }
        s.images = num::concat_batch(imgs);
        s.masks = num::concat_batch(masks);
        ds.sites.push_back(std::move(s));
    }
    return ds;
}

} // namespace hflow::eval
