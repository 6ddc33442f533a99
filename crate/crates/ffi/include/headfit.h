#ifndef HEADFIT_H
#define HEADFIT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HfStatus {
  HF_STATUS_OK = 0,
  /**
   * Null pointer or a length that does not match the object.
   */
  HF_STATUS_BAD_ARGUMENT = 1,
  /**
   * Input rejected by validation.
   */
  HF_STATUS_INVALID = 2,
  HF_STATUS_NUMERICAL = 3,
  HF_STATUS_IO = 4,
  /**
   * Malformed file contents.
   */
  HF_STATUS_FORMAT = 5,
  /**
   * Internal panic caught at the boundary.
   */
  HF_STATUS_PANIC = 6,
} HfStatus;

typedef struct HfBuffers HfBuffers;

typedef struct HfModel HfModel;

typedef struct HfNet HfNet;

typedef struct HfRig HfRig;

/**
 * Per-frame pose.
 */
typedef struct HfPose {
  double omega[3];
  double global_rot[3];
  double global_trans[3];
} HfPose;

/**
 * Pinhole camera; rotation is world-to-camera axis-angle.
 */
typedef struct HfCamera {
  double fx;
  double fy;
  double cx;
  double cy;
  uint32_t width;
  uint32_t height;
  double rotation[3];
  double translation[3];
} HfCamera;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call on the same thread.
 */
const char *hf_last_error(void);

/**
 * Library version as a static string.
 */
const char *hf_version(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum HfStatus hf_model_load(const char *path_, struct HfModel **out_);

/**
 * The procedural test head used by the synthetic scenes.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum HfStatus hf_model_toy(struct HfModel **out_);

/**
 * # Safety
 * `model` must come from `hf_model_*` and not be used afterwards. Null is ignored.
 */
void hf_model_free(struct HfModel *model);

/**
 * # Safety
 * `model` must be a live handle; output pointers may be null.
 */
enum HfStatus hf_model_dims(const struct HfModel *model,
                            size_t *n_vertices,
                            size_t *k_beta,
                            size_t *k_psi,
                            size_t *n_joints);

/**
 * Builds the dense rig for one identity. The model handle is not consumed.
 *
 * # Safety
 * `beta` must hold `n_beta` doubles.
 */
enum HfStatus hf_rig_new(const struct HfModel *model,
                         const double *beta,
                         size_t n_beta,
                         uint32_t levels,
                         bool dilate_facial,
                         struct HfRig **out_);

/**
 * # Safety
 * `rig` must come from `hf_rig_new` and not be used afterwards. Null is ignored.
 */
void hf_rig_free(struct HfRig *rig);

/**
 * # Safety
 * `rig` must be a live handle; output pointers may be null.
 */
enum HfStatus hf_rig_dims(const struct HfRig *rig, size_t *n_dense, size_t *n_faces, size_t *k_psi);

/**
 * Dense triangles as `3 * n_faces` vertex indices.
 *
 * # Safety
 * `faces` must have room for `len` entries.
 */
enum HfStatus hf_rig_faces(const struct HfRig *rig, uint32_t *faces, size_t len);

/**
 * 1 for facial dense vertices, 0 elsewhere.
 *
 * # Safety
 * `mask` must have room for `len` bytes.
 */
enum HfStatus hf_rig_facial_mask(const struct HfRig *rig, uint8_t *mask, size_t len);

/**
 * Canonical mesh for `psi` plus the offset fields, posed by skinning.
 * `static_field` and `dynamic_field` hold `3 * n_dense` doubles or are null
 * for zero; the dynamic field is masked to the facial region.
 *
 * # Safety
 * Every non-null buffer must have the stated length.
 */
enum HfStatus hf_rig_pose(const struct HfRig *rig,
                          const double *psi,
                          size_t k_psi,
                          const struct HfPose *pose,
                          const double *static_field,
                          const double *dynamic_field,
                          double *canonical_out,
                          double *posed_out,
                          size_t len);

/**
 * Rasterizes a mesh with smooth vertex normals.
 *
 * # Safety
 * `positions` holds `3 * n_vertices` doubles, `faces` holds `3 * n_faces` indices.
 */
enum HfStatus hf_rasterize(const double *positions,
                           size_t n_vertices,
                           const uint32_t *faces,
                           size_t n_faces,
                           const struct HfCamera *camera,
                           struct HfBuffers **out_);

/**
 * # Safety
 * `buffers` must come from `hf_rasterize` and not be used afterwards. Null is ignored.
 */
void hf_buffers_free(struct HfBuffers *buffers);

/**
 * Copies the buffers out; each pointer may be null to skip it. Sizes are
 * `3 * w * h` for normals and `w * h` for the others, row-major from the top.
 * Uncovered pixels have zero normal, infinite depth and face id -1.
 *
 * # Safety
 * Non-null pointers must have the sizes above.
 */
enum HfStatus hf_buffers_read(const struct HfBuffers *buffers,
                              uint32_t *width,
                              uint32_t *height,
                              double *normal,
                              double *depth,
                              int64_t *face_id);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum HfStatus hf_net_load(const char *path_, struct HfNet **out_);

/**
 * # Safety
 * `net` must come from `hf_net_load` and not be used afterwards. Null is ignored.
 */
void hf_net_free(struct HfNet *net);

/**
 * # Safety
 * `net` must be a live handle; output pointers may be null.
 */
enum HfStatus hf_net_dims(const struct HfNet *net, size_t *k_psi, size_t *d_code);

/**
 * Codes for `frames` rows of `psi` (`frames * k_psi`) and `omega` (`frames * 3`)
 * into `codes` (`frames * d_code`).
 *
 * # Safety
 * Buffers must have the sizes above.
 */
enum HfStatus hf_encode(const struct HfNet *net,
                        const double *psi,
                        const double *omega,
                        size_t frames,
                        double *codes);

/**
 * Offsets for one code over a neutral identity of `n` vertices.
 * `positions`, `normals` and `offsets` hold `3 * n` doubles, `mask` holds
 * `n` bytes (nonzero = facial), `code` holds `d_code` doubles.
 *
 * # Safety
 * Buffers must have the sizes above.
 */
enum HfStatus hf_predict(const struct HfNet *net,
                         const double *positions,
                         const double *normals,
                         const uint8_t *mask,
                         size_t n,
                         const double *code,
                         size_t d_code,
                         double *offsets);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HEADFIT_H */
