#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ahmf/tensor.hpp"

// Synthetic multi-domain driving scenes at desk scale, plus the bit-exact
// file formats the tools exchange: a little-endian tensor container, a PGM
// visualization with an exact sidecar, and a tab-separated dataset manifest.

namespace ahmf::data {

// Which mover the ground-truth attention follows. leftmost/rightmost are
// evaluated per frame; fastest is a property of the whole sequence.
enum class DomainRule { attend_leftmost, attend_rightmost, attend_fastest };

DomainRule rule_from_string(const std::string& name);
std::string rule_name(DomainRule rule);

struct SceneSpec {
    int h = 32, w = 32;    // frame extents
    int t = 5;             // frames per sequence
    int n_movers = 3;
    DomainRule rule = DomainRule::attend_leftmost;
    // When set, every mover looks identical from frame 2 on; the target is
    // identifiable only by the cue color shown in the first two frames.
    bool memory_task = false;
    double noise_sigma = 0.05;   // per-pixel background noise
    // Movers are drawn at their true position plus per-frame jitter while the
    // ground truth follows the true position, so temporal integration pays.
    double jitter_sigma = 0.0;
    double blob_sigma = 2.0;     // mover footprint and gt spread
    double speed_min = 0.5, speed_max = 1.5;  // pixels per frame
    std::uint64_t seed = 0;
    std::string domain_id = "default";
};

struct MoverInit {
    double x = 0.0, y = 0.0;   // initial center
    double vx = 0.0, vy = 0.0; // per-frame velocity
};

struct Sample {
    std::vector<Tensor> frames;      // T entries of [3,H,W]
    std::vector<Tensor> gt;          // T entries of [H,W], each normalized
    std::vector<Tensor> fixations;   // T entries of [H,W], top-3 gt pixels
    std::string domain_id;
    int sequence_id = 0;
    // True when the memory-task construction equalized mover appearance after
    // the cue frames, i.e. no single frame past frame 2 identifies the target.
    bool cue_equalized = false;
};

// Renders one sequence from explicit mover initial states. Exposed so tests
// can construct exact scenes (mirrored pairs, single movers).
Sample render_scene(const SceneSpec& spec, const std::vector<MoverInit>& movers,
                    int sequence_id);

// n sequences, a pure function of (spec, n): movers, noise, and jitter all
// come from named streams of spec.seed.
std::vector<Sample> generate(const SceneSpec& spec, int n);

// ---------------------------------------------------------- tensor format --
// magic "TSR1" | rank u32 LE | extents u32 LE | payload f32 LE row-major

void write_tensor(const std::string& path, const Tensor& t);
Tensor read_tensor(const std::string& path);

// In-memory form of the same encoding, used where tensors are embedded in a
// larger container. `what` labels decode errors (e.g. "tensor file 'x.tsr'").
std::string encode_tensor(const Tensor& t);
Tensor decode_tensor(const std::string& bytes, const std::string& what);

// Whole-file helpers: write-to-tmp-then-rename, and slurp with a clear error.
void write_file_atomic(const std::string& path, const std::string& bytes);
std::string read_file(const std::string& path);

// ------------------------------------------------------------- map format --
// 8-bit PGM scaled by the map's max for quick visualization, plus an exact
// f32 sidecar at path + ".tsr"; reads prefer the sidecar when present.

void write_map(const std::string& path, const Tensor& map);
Tensor read_map(const std::string& path);

// --------------------------------------------------------------- manifest --

struct ManifestEntry {
    std::string domain_id;
    std::string seq_path, gt_path, fix_path;  // relative to the dataset dir
    std::string split;                        // train | val | test
};

struct DatasetIndex {
    std::vector<ManifestEntry> entries;
};

// Writes the three tensor files of one sample into dir and returns the stem.
std::string write_sample_files(const std::string& dir, const Sample& s);

// Scans dir for sample triples and assigns train/val/test 70/15/15 by ranking
// a seeded hash of each sequence stem; incomplete triples are an error.
DatasetIndex build_manifest(const std::string& dir, std::uint64_t seed);

std::string manifest_tsv(const DatasetIndex& index);
DatasetIndex parse_manifest_tsv(const std::string& text);

// Reads one sample's files back (cue metadata is not persisted).
Sample load_sample(const std::string& dir, const ManifestEntry& entry);

}  // namespace ahmf::data
