#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "mbfuse/synth.hpp"

namespace mbfuse {

// Binary 8-bit PPM (P6, rgb as (3, H, W)) and PGM (P5, (1, H, W)); values
// scale to [0, 1] on load and round to the nearest level on save.
Tensor<float> read_pnm(const std::string& path);
void write_ppm(const std::string& path, const Tensor<float>& rgb);
void write_pgm(const std::string& path, const Tensor<float>& gray);

/// One `label x y w h occ` line per box, `%` lines are comments. `person`
/// boxes are regular ground truth; any other label is an ignore region.
/// occ 0/1/2 maps to none/partial/heavy.
std::vector<GroundTruthBox> parse_annotations(std::istream& in, const std::string& source = "<stream>");
std::vector<GroundTruthBox> load_annotations(const std::string& path);
void write_annotations(std::ostream& out, const std::vector<GroundTruthBox>& boxes);
void save_annotations(const std::string& path, const std::vector<GroundTruthBox>& boxes);

/// On-disk layout: visible/<id>.ppm, lwir/<id>.pgm, annotations/<id>.txt and
/// labels.txt with one `<id> day|night` line per frame (this also fixes the
/// frame order).
void save_dataset(const std::string& dir, const std::vector<SyntheticScene>& scenes);
std::vector<SyntheticScene> load_dataset(const std::string& dir);

}  // namespace mbfuse
