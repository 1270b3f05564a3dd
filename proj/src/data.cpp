#include "ahmf/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "ahmf/errors.hpp"
#include "ahmf/rng.hpp"

namespace fs = std::filesystem;

namespace ahmf::data {

DomainRule rule_from_string(const std::string& name) {
    if (name == "attend_leftmost") return DomainRule::attend_leftmost;
    if (name == "attend_rightmost") return DomainRule::attend_rightmost;
    if (name == "attend_fastest") return DomainRule::attend_fastest;
    throw ConfigError("unknown domain rule '" + name +
                      "' (expected attend_leftmost, attend_rightmost, or attend_fastest)");
}

std::string rule_name(DomainRule rule) {
    switch (rule) {
        case DomainRule::attend_leftmost: return "attend_leftmost";
        case DomainRule::attend_rightmost: return "attend_rightmost";
        case DomainRule::attend_fastest: return "attend_fastest";
    }
    return "?";
}

// -------------------------------------------------------------- rendering --

namespace {

void validate_spec(const SceneSpec& spec) {
    if (spec.h < 8 || spec.w < 8)
        throw ConfigError("scene: frame extents must be at least 8x8, got " +
                          std::to_string(spec.h) + "x" + std::to_string(spec.w));
    if (spec.t < 1) throw ConfigError("scene: need at least one frame");
    if (spec.n_movers < 1) throw ConfigError("scene: need at least one mover");
    if (spec.blob_sigma <= 0.0) throw ConfigError("scene: blob_sigma must be positive");
    if (spec.noise_sigma < 0.0 || spec.jitter_sigma < 0.0)
        throw ConfigError("scene: noise and jitter sigmas must be nonnegative");
    if (spec.speed_min < 0.0 || spec.speed_max < spec.speed_min)
        throw ConfigError("scene: speed range must satisfy 0 <= min <= max");
}

// Placement cells for initial positions; also defines the capacity bound.
int placement_cell(const SceneSpec& spec) {
    return std::max(2, static_cast<int>(std::ceil(4.0 * spec.blob_sigma)));
}

int capacity(const SceneSpec& spec) {
    const int cell = placement_cell(spec);
    return (spec.h / cell) * (spec.w / cell);
}

struct MoverState {
    double x, y, vx, vy;
    double speed() const { return std::hypot(vx, vy); }
};

void advance(MoverState& m, double lo_x, double hi_x, double lo_y, double hi_y) {
    m.x += m.vx;
    if (m.x < lo_x) {
        m.x = 2.0 * lo_x - m.x;
        m.vx = -m.vx;
    } else if (m.x > hi_x) {
        m.x = 2.0 * hi_x - m.x;
        m.vx = -m.vx;
    }
    m.y += m.vy;
    if (m.y < lo_y) {
        m.y = 2.0 * lo_y - m.y;
        m.vy = -m.vy;
    } else if (m.y > hi_y) {
        m.y = 2.0 * hi_y - m.y;
        m.vy = -m.vy;
    }
}

int select_target(const std::vector<MoverState>& movers, DomainRule rule) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(movers.size()); ++i) {
        switch (rule) {
            case DomainRule::attend_leftmost:
                if (movers[i].x < movers[best].x) best = i;
                break;
            case DomainRule::attend_rightmost:
                if (movers[i].x > movers[best].x) best = i;
                break;
            case DomainRule::attend_fastest:
                if (movers[i].speed() > movers[best].speed()) best = i;
                break;
        }
    }
    return best;
}

void splat(Tensor& frame, double cx, double cy, double sigma, const double color[3]) {
    const int h = frame.extent(1), w = frame.extent(2);
    const double inv = 1.0 / (2.0 * sigma * sigma);
    const int r = static_cast<int>(std::ceil(3.0 * sigma));
    const int y0 = std::max(0, static_cast<int>(std::floor(cy)) - r);
    const int y1 = std::min(h - 1, static_cast<int>(std::ceil(cy)) + r);
    const int x0 = std::max(0, static_cast<int>(std::floor(cx)) - r);
    const int x1 = std::min(w - 1, static_cast<int>(std::ceil(cx)) + r);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            const double g = std::exp(-d2 * inv);
            for (int c = 0; c < 3; ++c)
                frame.at3(c, y, x) = static_cast<float>(
                    std::min(1.0, static_cast<double>(frame.at3(c, y, x)) + color[c] * g));
        }
}

Tensor gaussian_map(int h, int w, double cx, double cy, double sigma) {
    TensorT<double> g({h, w});
    const double inv = 1.0 / (2.0 * sigma * sigma);
    double total = 0.0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            const double v = std::exp(-d2 * inv);
            g.at2(y, x) = v;
            total += v;
        }
    for (auto& v : g.data) v /= total;
    return cast_tensor<float>(g);
}

Tensor top3_fixations(const Tensor& gt) {
    const std::size_t k = std::min<std::size_t>(3, gt.numel());
    std::vector<std::size_t> idx(gt.numel());
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (gt.data[a] != gt.data[b]) return gt.data[a] > gt.data[b];
                          return a < b;  // deterministic tie break
                      });
    Tensor fix(gt.shape);
    for (std::size_t i = 0; i < k; ++i) fix.data[idx[i]] = 1.0f;
    return fix;
}

}  // namespace

Sample render_scene(const SceneSpec& spec, const std::vector<MoverInit>& movers_in,
                    int sequence_id) {
    validate_spec(spec);
    if (movers_in.empty()) throw ConfigError("scene: no movers given");

    std::vector<MoverState> movers;
    for (const auto& m : movers_in) movers.push_back({m.x, m.y, m.vx, m.vy});

    const double margin = spec.blob_sigma;
    const double lo_x = margin, hi_x = spec.w - 1 - margin;
    const double lo_y = margin, hi_y = spec.h - 1 - margin;

    Rng noise_rng(spec.seed, "data/noise", static_cast<std::uint64_t>(sequence_id));
    Rng jitter_rng(spec.seed, "data/jitter", static_cast<std::uint64_t>(sequence_id));

    // The memory task pins the target to the rule's pick on the cue frame;
    // otherwise the rule is re-evaluated every frame.
    const int pinned_target = select_target(movers, spec.rule);

    const double cue_target[3] = {1.0, 0.15, 0.15};
    const double cue_other[3] = {0.15, 0.35, 1.0};
    const double plain[3] = {0.85, 0.85, 0.85};

    Sample s;
    s.domain_id = spec.domain_id;
    s.sequence_id = sequence_id;
    s.cue_equalized = spec.memory_task;

    for (int t = 0; t < spec.t; ++t) {
        const int target =
            spec.memory_task ? pinned_target : select_target(movers, spec.rule);

        Tensor frame({3, spec.h, spec.w});
        for (int y = 0; y < spec.h; ++y)
            for (int x = 0; x < spec.w; ++x) {
                const double texture =
                    0.25 + 0.08 * std::sin(0.7 * x + 0.3 * y) * std::cos(0.4 * y);
                for (int c = 0; c < 3; ++c) {
                    const double n = spec.noise_sigma * noise_rng.normal();
                    frame.at3(c, y, x) =
                        static_cast<float>(std::clamp(texture + n, 0.0, 1.0));
                }
            }

        for (int i = 0; i < static_cast<int>(movers.size()); ++i) {
            const double* color = plain;
            if (spec.memory_task && t < 2) color = i == pinned_target ? cue_target : cue_other;
            const double jx = spec.jitter_sigma * jitter_rng.normal();
            const double jy = spec.jitter_sigma * jitter_rng.normal();
            splat(frame, movers[static_cast<std::size_t>(i)].x + jx,
                  movers[static_cast<std::size_t>(i)].y + jy, spec.blob_sigma, color);
        }
        s.frames.push_back(std::move(frame));

        const auto& tgt = movers[static_cast<std::size_t>(target)];
        Tensor gt = gaussian_map(spec.h, spec.w, tgt.x, tgt.y, spec.blob_sigma);
        s.fixations.push_back(top3_fixations(gt));
        s.gt.push_back(std::move(gt));

        for (auto& m : movers) advance(m, lo_x, hi_x, lo_y, hi_y);
    }
    return s;
}

std::vector<Sample> generate(const SceneSpec& spec, int n) {
    validate_spec(spec);
    if (n < 1) throw ConfigError("generate: need n >= 1 sequences");
    const int cap = capacity(spec);
    if (spec.n_movers > cap)
        throw ConfigError("generate: " + std::to_string(spec.n_movers) +
                          " movers exceed the frame capacity of " + std::to_string(cap) +
                          " for blob_sigma " + std::to_string(spec.blob_sigma));

    const int cell = placement_cell(spec);
    const int cells_x = spec.w / cell;

    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        Rng rng(spec.seed, "data/movers", static_cast<std::uint64_t>(i));
        std::vector<int> cells(static_cast<std::size_t>(cap));
        std::iota(cells.begin(), cells.end(), 0);
        rng.shuffle(cells.begin(), cells.end());

        std::vector<MoverInit> movers;
        for (int m = 0; m < spec.n_movers; ++m) {
            const int c = cells[static_cast<std::size_t>(m)];
            const double cx = (c % cells_x) * cell + cell / 2.0;
            const double cy = (c / cells_x) * cell + cell / 2.0;
            MoverInit mi;
            mi.x = cx + rng.uniform(-cell / 4.0, cell / 4.0);
            mi.y = cy + rng.uniform(-cell / 4.0, cell / 4.0);
            const double speed = rng.uniform(spec.speed_min, spec.speed_max);
            const double ang = rng.uniform(0.0, 6.283185307179586);
            mi.vx = speed * std::cos(ang);
            mi.vy = speed * std::sin(ang);
            movers.push_back(mi);
        }
        out.push_back(render_scene(spec, movers, i));
    }
    return out;
}

// ------------------------------------------------------------- file bytes --

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

std::uint32_t get_u32(const std::string& bytes, std::size_t off) {
    const auto b = [&](std::size_t i) {
        return static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[off + i]));
    };
    return b(0) | (b(1) << 8) | (b(2) << 16) | (b(3) << 24);
}

constexpr std::size_t kMaxElements = 1u << 28;

}  // namespace

void write_file_atomic(const std::string& path, const std::string& bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot open '" + tmp + "' for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw DataError("short write to '" + tmp + "'");
    }
    fs::rename(tmp, path);
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "' for reading");
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

std::string encode_tensor(const Tensor& t) {
    if (t.rank() > 5)
        throw UsageError("tensor format supports rank <= 5, got " + shape_str(t.shape));
    std::string bytes = "TSR1";
    put_u32(bytes, static_cast<std::uint32_t>(t.rank()));
    for (int e : t.shape) put_u32(bytes, static_cast<std::uint32_t>(e));
    for (float v : t.data) put_u32(bytes, std::bit_cast<std::uint32_t>(v));
    return bytes;
}

void write_tensor(const std::string& path, const Tensor& t) {
    write_file_atomic(path, encode_tensor(t));
}

Tensor decode_tensor(const std::string& bytes, const std::string& what) {
    auto fail = [&](const std::string& msg, std::size_t off) -> DataError {
        return DataError(what + ": " + msg + " at byte " + std::to_string(off));
    };
    if (bytes.size() < 8) throw fail("truncated header", bytes.size());
    if (bytes.compare(0, 4, "TSR1") != 0) throw fail("bad magic", 0);
    const std::uint32_t rank = get_u32(bytes, 4);
    if (rank > 5) throw fail("unsupported rank " + std::to_string(rank), 4);

    std::vector<int> shape;
    std::size_t numel = 1;
    std::size_t off = 8;
    for (std::uint32_t i = 0; i < rank; ++i, off += 4) {
        if (bytes.size() < off + 4) throw fail("truncated header", bytes.size());
        const std::uint32_t e = get_u32(bytes, off);
        if (e == 0 || e > kMaxElements || numel > kMaxElements / e)
            throw fail("extent overflow", off);
        numel *= e;
        shape.push_back(static_cast<int>(e));
    }

    const std::size_t expected = off + 4 * numel;
    if (bytes.size() < expected)
        throw fail("truncated payload (expected " + std::to_string(expected) + " bytes)",
                   bytes.size());
    if (bytes.size() > expected) throw fail("trailing data", expected);

    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < numel; ++i)
        t.data[i] = std::bit_cast<float>(get_u32(bytes, off + 4 * i));
    return t;
}

Tensor read_tensor(const std::string& path) {
    return decode_tensor(read_file(path), "tensor file '" + path + "'");
}

void write_map(const std::string& path, const Tensor& map) {
    if (map.rank() != 2)
        throw UsageError("write_map: expected a rank-2 map, got " + shape_str(map.shape));
    double total = 0.0, mx = 0.0;
    for (float v : map.data) {
        if (v < 0.0f) throw UsageError("write_map: map has a negative entry");
        total += v;
        mx = std::max(mx, static_cast<double>(v));
    }
    if (std::fabs(total - 1.0) > 1e-5)
        throw UsageError("write_map: map is not normalized (sum = " + std::to_string(total) +
                         ")");

    std::string bytes = "P5\n" + std::to_string(map.extent(1)) + " " +
                        std::to_string(map.extent(0)) + "\n255\n";
    for (float v : map.data)
        bytes.push_back(static_cast<char>(
            static_cast<unsigned char>(std::lround(255.0 * v / mx))));
    write_file_atomic(path, bytes);
    write_tensor(path + ".tsr", map);
}

Tensor read_map(const std::string& path) {
    if (fs::exists(path + ".tsr")) return read_tensor(path + ".tsr");
    const std::string bytes = read_file(path);
    std::istringstream in(bytes);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    if (!in || magic != "P5" || w <= 0 || h <= 0 || maxval != 255)
        throw DataError("map file '" + path + "': malformed PGM header");
    in.get();  // the single whitespace byte after maxval
    const std::size_t payload_start = static_cast<std::size_t>(in.tellg());
    const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
    if (bytes.size() - payload_start < need)
        throw DataError("map file '" + path + "': truncated PGM payload at byte " +
                        std::to_string(bytes.size()));
    Tensor map({h, w});
    for (std::size_t i = 0; i < need; ++i)
        map.data[i] =
            static_cast<float>(static_cast<unsigned char>(bytes[payload_start + i])) / 255.0f;
    return map;
}

// --------------------------------------------------------------- manifest --

namespace {

Tensor stack_along_t(const std::vector<Tensor>& parts) {
    std::vector<int> shape = {static_cast<int>(parts.size())};
    shape.insert(shape.end(), parts[0].shape.begin(), parts[0].shape.end());
    Tensor out(std::move(shape));
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.data.begin(), p.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
        off += p.numel();
    }
    return out;
}

std::vector<Tensor> unstack_along_t(const Tensor& t) {
    std::vector<int> inner(t.shape.begin() + 1, t.shape.end());
    const std::size_t step = TensorT<float>::numel_of(inner);
    std::vector<Tensor> parts;
    for (int i = 0; i < t.extent(0); ++i) {
        Tensor p(inner);
        const std::size_t off = static_cast<std::size_t>(i) * step;
        std::copy(t.data.begin() + static_cast<std::ptrdiff_t>(off),
                  t.data.begin() + static_cast<std::ptrdiff_t>(off + step), p.data.begin());
        parts.push_back(std::move(p));
    }
    return parts;
}

std::string sample_stem(const Sample& s) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "-%04d", s.sequence_id);
    return s.domain_id + buf;
}

}  // namespace

std::string write_sample_files(const std::string& dir, const Sample& s) {
    if (s.frames.empty()) throw UsageError("write_sample_files: sample has no frames");
    const std::string stem = sample_stem(s);
    const fs::path base = fs::path(dir) / stem;
    write_tensor(base.string() + ".frames.tsr", stack_along_t(s.frames));
    write_tensor(base.string() + ".gt.tsr", stack_along_t(s.gt));
    write_tensor(base.string() + ".fix.tsr", stack_along_t(s.fixations));
    return stem;
}

DatasetIndex build_manifest(const std::string& dir, std::uint64_t seed) {
    if (!fs::is_directory(dir)) throw DataError("manifest: '" + dir + "' is not a directory");

    const std::string suffix = ".frames.tsr";
    std::vector<std::string> stems;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.size() > suffix.size() &&
            name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
            stems.push_back(name.substr(0, name.size() - suffix.size()));
    }
    std::sort(stems.begin(), stems.end());

    std::vector<std::string> dangling;
    for (const auto& stem : stems)
        for (const char* part : {".gt.tsr", ".fix.tsr"})
            if (!fs::exists(fs::path(dir) / (stem + part)))
                dangling.push_back(stem + part);
    if (!dangling.empty()) {
        std::string list;
        for (const auto& p : dangling) list += (list.empty() ? "" : ", ") + p;
        throw DataError("manifest: dangling sample files: " + list);
    }

    // rank the stems by a seeded hash, then cut 70/15/15
    std::vector<std::size_t> order(stems.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<std::uint64_t> keys(stems.size());
    for (std::size_t i = 0; i < stems.size(); ++i)
        keys[i] = Rng(seed, "split", detail::fnv1a(stems[i])).next_u64();
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (keys[a] != keys[b]) return keys[a] < keys[b];
        return stems[a] < stems[b];
    });
    const auto n = static_cast<std::ptrdiff_t>(stems.size());
    const auto n_train = static_cast<std::ptrdiff_t>(std::lround(0.70 * static_cast<double>(n)));
    const auto n_val = std::min(
        static_cast<std::ptrdiff_t>(std::lround(0.15 * static_cast<double>(n))), n - n_train);
    std::vector<std::string> split(stems.size());
    for (std::ptrdiff_t r = 0; r < n; ++r)
        split[order[static_cast<std::size_t>(r)]] =
            r < n_train ? "train" : (r < n_train + n_val ? "val" : "test");

    DatasetIndex index;
    for (std::size_t i = 0; i < stems.size(); ++i) {
        ManifestEntry e;
        const std::size_t dash = stems[i].rfind('-');
        e.domain_id = dash == std::string::npos ? stems[i] : stems[i].substr(0, dash);
        e.seq_path = stems[i] + ".frames.tsr";
        e.gt_path = stems[i] + ".gt.tsr";
        e.fix_path = stems[i] + ".fix.tsr";
        e.split = split[i];
        index.entries.push_back(std::move(e));
    }
    return index;
}

std::string manifest_tsv(const DatasetIndex& index) {
    std::string out;
    for (const auto& e : index.entries) {
        out += e.domain_id + '\t' + e.seq_path + '\t' + e.gt_path + '\t' + e.fix_path + '\t' +
               e.split + '\n';
    }
    return out;
}

DatasetIndex parse_manifest_tsv(const std::string& text) {
    DatasetIndex index;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        while (true) {
            const std::size_t tab = line.find('\t', start);
            fields.push_back(line.substr(start, tab - start));
            if (tab == std::string::npos) break;
            start = tab + 1;
        }
        if (fields.size() != 5)
            throw DataError("manifest line " + std::to_string(line_no) + ": expected 5 fields, got " +
                            std::to_string(fields.size()));
        if (fields[4] != "train" && fields[4] != "val" && fields[4] != "test")
            throw DataError("manifest line " + std::to_string(line_no) + ": unknown split '" +
                            fields[4] + "'");
        index.entries.push_back({fields[0], fields[1], fields[2], fields[3], fields[4]});
    }
    return index;
}

Sample load_sample(const std::string& dir, const ManifestEntry& entry) {
    const auto at = [&](const std::string& rel) { return (fs::path(dir) / rel).string(); };
    const Tensor frames = read_tensor(at(entry.seq_path));
    const Tensor gt = read_tensor(at(entry.gt_path));
    const Tensor fix = read_tensor(at(entry.fix_path));
    if (frames.rank() != 4 || gt.rank() != 3 || fix.rank() != 3)
        throw DataError("sample '" + entry.seq_path + "': unexpected ranks " +
                        shape_str(frames.shape) + ", " + shape_str(gt.shape) + ", " +
                        shape_str(fix.shape));
    if (frames.extent(0) != gt.extent(0) || frames.extent(0) != fix.extent(0))
        throw DataError("sample '" + entry.seq_path + "': frame counts disagree");

    Sample s;
    s.domain_id = entry.domain_id;
    s.frames = unstack_along_t(frames);
    s.gt = unstack_along_t(gt);
    s.fixations = unstack_along_t(fix);
    const std::size_t dash = entry.seq_path.rfind('-');
    if (dash != std::string::npos)
        s.sequence_id = std::atoi(entry.seq_path.substr(dash + 1).c_str());
    return s;
}

}  // namespace ahmf::data
