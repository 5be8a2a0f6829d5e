// phantoms.h - synthetic cortex-like volumes with analytic thickness.
//
// Sheet phantoms are the set of points within t/2 of a bounded mid-surface:
// a rectangle (slab) or a rectangle bent by a sinusoid along one axis (folded
// sheet). The sheet is cut into bands along its other in-surface axis, each
// band with its own label and thickness. Because the solid is a Minkowski
// sum with rounded rims, its medial surface is the mid-surface itself and
// the truth thickness of a band is exactly its t. The shell is split into
// azimuthal sectors instead.

#pragma once

#include "isomtl/volgrid.h"

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace isomtl {

enum class PhantomKind { Slab, SphericalShell, FoldedSheet };

PhantomKind parse_phantom_kind(const std::string &s); // slab, spherical_shell, folded_sheet
std::string to_string(PhantomKind k);

using ContrastTable = std::map<int, double>; // label -> mean intensity

/// T2w-like table: band pairs share an intensity level.
ContrastTable t2_contrast();
/// T1w-like table: separates neighbouring bands that T2w leaves equal.
ContrastTable t1_contrast();

struct PhantomSpec {
    PhantomKind kind = PhantomKind::FoldedSheet;
    double spacing_mm = 0.2;
    Vec3 fov_mm{19.2, 19.2, 20.8};
    Vec3 center_offset_mm{0, 0, 0};

    // Sheet frame: normal tilted from the slice axis towards +y by tilt_deg,
    // then the frame turned about the slice axis by azimuth_deg. The fold runs
    // along u (in the y-z plane before the azimuth), the bands along v.
    double tilt_deg = 0.0;
    double azimuth_deg = 0.0;
    double sheet_length_mm = 14.0; // along u
    double sheet_width_mm = 16.8;  // along v, split evenly into bands
    double fold_amplitude_mm = 0.0;
    double fold_period_mm = 12.0;
    double fold_phase = 0.0;

    double shell_radius_mm = 7.0; // mid-surface radius

    std::vector<int> band_labels{1, 2, 3, 4, 5, 6, 7};
    std::vector<double> band_thickness_mm = std::vector<double>(7, 2.4);

    ContrastTable contrast = t2_contrast();
    double bias_amplitude = 0.05; // peak relative deviation of the bias field
    uint64_t bias_seed = 0;

    /// Throws std::invalid_argument, e.g. for bands thinner than two voxels
    /// or folds whose curvature radius drops below the half-thickness.
    void validate() const;
};

struct BandTruth {
    int label = 0;
    std::string name;
    double thickness_mm = 0.0;
};

struct Phantom {
    ScalarVolume image;
    LabelVolume labels;
    std::vector<BandTruth> truth;
};

/// Isotropic grid at spec.spacing_mm covering the field of view, centred on 0.
Grid3 phantom_grid(const PhantomSpec &spec);
/// Analytic labels at the voxel centres of any grid.
LabelVolume rasterize_labels(const PhantomSpec &spec, const Grid3 &grid);
/// Contrast table value per voxel times the smooth multiplicative bias field.
ScalarVolume render_image(const PhantomSpec &spec, const LabelVolume &labels, const ContrastTable &contrast);
std::vector<BandTruth> band_truth(const PhantomSpec &spec);
Phantom make_phantom(const PhantomSpec &spec);

struct AcquisitionSpec {
    double in_plane_mm = 0.4;
    double slice_mm = 2.6;
    double noise_sigma = 0.0; // fraction of the contrast range (max - min of the table)
    ContrastTable contrast = t2_contrast();

    void validate() const;
    double noise_std() const;
};

/// Grid of whole acquisition voxels inside the hires field of view, sharing its lower corner.
Grid3 acquisition_grid(const Grid3 &hires, double in_plane_mm, double slice_mm);
/// Exact box average: every target voxel is the volume-weighted mean of the
/// source voxels it overlaps. Target spacing must be >= source spacing.
ScalarVolume box_average(const ScalarVolume &src, const Grid3 &target);
/// Box average onto the acquisition grid plus Gaussian noise.
ScalarVolume simulate_acquisition(const ScalarVolume &hires, const AcquisitionSpec &acq, std::mt19937_64 &rng);

struct CohortSpec {
    int n_subjects = 12; // study subjects, groups alternate A-CN / A+MCI
    int n_sessions = 1;  // 2 adds a rescan of unchanged anatomy (longitudinal null)
    int n_atlas = 4;     // subjects with coarse manual labels for segmentation training
    int n_exvivo = 4;    // hyper-resolution image/label pairs for the label upsampler
    std::map<std::string, double> effect_mm; // band name -> thickness change in A+MCI

    double base_thickness_mm = 2.4;
    double subject_sd_mm = 0.1;
    double band_sd_mm = 0.05;
    double age_min = 60.0, age_max = 85.0;
    double age_slope_mm_per_year = -0.005; // around age 70
    double tilt_min_deg = 20.0, tilt_max_deg = 60.0;
    double azimuth_max_deg = 15.0;
    double amplitude_min_mm = 0.5, amplitude_max_mm = 1.5;
    double shift_max_mm = 0.4;                 // per-session repositioning
    int interval_min_days = 300, interval_max_days = 800;

    AcquisitionSpec t2{0.4, 2.6, 0.03, t2_contrast()};
    AcquisitionSpec t1{0.8, 0.8, 0.03, t1_contrast()};
    double hyperres_slice_mm = 0.52;
    uint64_t seed = 1;

    void validate() const;
};

/// Per-subject geometry of a cohort member (deterministic in seed and index).
PhantomSpec cohort_subject_spec(const CohortSpec &spec, const std::string &role, int index, double *age = nullptr,
                                bool *patient = nullptr);

struct CohortOutput {
    std::filesystem::path manifest;   // unified manifest consumed by the pipeline
    std::filesystem::path truth_csv;  // study-table CSV with truth thickness (session 1)
    std::filesystem::path labels_json;
};

/// Writes NIfTI volumes, truth JSON per subject, the manifest and truth CSVs.
CohortOutput make_cohort(const CohortSpec &spec, const std::filesystem::path &out_dir);

} // namespace isomtl
