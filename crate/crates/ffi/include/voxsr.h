#ifndef VOXSR_H
#define VOXSR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Pass as `margin` to use the network's receptive-field radius.
 */
#define VOXSR_MARGIN_AUTO -1

typedef enum VoxsrDtype {
  VOXSR_DTYPE_UINT8 = 0,
  VOXSR_DTYPE_UINT16 = 1,
  VOXSR_DTYPE_FLOAT32 = 2,
} VoxsrDtype;

/**
 * Result of every fallible call.
 */
typedef enum VoxsrStatus {
  VOXSR_STATUS_OK = 0,
  VOXSR_STATUS_NULL_POINTER = 1,
  VOXSR_STATUS_INVALID_ARGUMENT = 2,
  VOXSR_STATUS_IO = 3,
  VOXSR_STATUS_FORMAT = 4,
  VOXSR_STATUS_SHAPE_MISMATCH = 5,
  VOXSR_STATUS_RUNTIME = 6,
  VOXSR_STATUS_PANIC = 7,
} VoxsrStatus;

/**
 * Opaque network handle.
 */
typedef struct VoxsrNetwork VoxsrNetwork;

/**
 * Opaque volume handle.
 */
typedef struct VoxsrVolume VoxsrVolume;

typedef struct VoxsrNetworkConfig {
  uint32_t depth;
  uint32_t channels;
  uint32_t kernel;
  bool residual;
} VoxsrNetworkConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *voxsr_version(void);

/**
 * Message describing the last failed call on this thread. Empty if none.
 * The pointer is valid until the next failing call on the same thread.
 */
const char *voxsr_last_error_message(void);

/**
 * Create a volume from `len` voxel values in z-major order. Values are
 * checked against the dtype's range and integrality.
 *
 * # Safety
 * `data` must point to `len` readable floats; `out` must be writable.
 */
enum VoxsrStatus voxsr_volume_new(size_t depth,
                                  size_t height,
                                  size_t width,
                                  enum VoxsrDtype dtype,
                                  double voxel_size_um,
                                  const float *data,
                                  size_t len,
                                  struct VoxsrVolume **out);

/**
 * Load `<path>.raw` with its `<path>.json` sidecar.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum VoxsrStatus voxsr_volume_load(const char *path, struct VoxsrVolume **out);

/**
 * # Safety
 * `vol` must be a live handle; `path` a NUL-terminated string.
 */
enum VoxsrStatus voxsr_volume_save(const struct VoxsrVolume *vol, const char *path);

/**
 * Write `[depth, height, width]` to `dims`.
 *
 * # Safety
 * `vol` must be a live handle; `dims` must point to 3 writable values.
 */
enum VoxsrStatus voxsr_volume_dims(const struct VoxsrVolume *vol, size_t *dims);

/**
 * # Safety
 * `vol` must be a live handle; `dtype` and `voxel_size_um` writable or null.
 */
enum VoxsrStatus voxsr_volume_info(const struct VoxsrVolume *vol,
                                   enum VoxsrDtype *dtype,
                                   double *voxel_size_um);

/**
 * Copy the voxels into `dst`, which must hold exactly the voxel count.
 *
 * # Safety
 * `vol` must be a live handle; `dst` must point to `len` writable floats.
 */
enum VoxsrStatus voxsr_volume_copy_data(const struct VoxsrVolume *vol, float *dst, size_t len);

/**
 * Release a volume. Null is ignored.
 *
 * # Safety
 * `vol` must be null or a handle not yet freed.
 */
void voxsr_volume_free(struct VoxsrVolume *vol);

/**
 * Box-downsample then cubic-upsample by `factor`.
 *
 * # Safety
 * `vol` must be a live handle; `out` must be writable.
 */
enum VoxsrStatus voxsr_degrade(const struct VoxsrVolume *vol,
                               size_t factor,
                               struct VoxsrVolume **out);

/**
 * # Safety
 * Both handles must be live; `out` must be writable.
 */
enum VoxsrStatus voxsr_psnr(const struct VoxsrVolume *a, const struct VoxsrVolume *b, double *out);

/**
 * SSIM with the default window for the dtype of `a`.
 *
 * # Safety
 * Both handles must be live; `out` must be writable.
 */
enum VoxsrStatus voxsr_ssim(const struct VoxsrVolume *a, const struct VoxsrVolume *b, double *out);

/**
 * # Safety
 * Both handles must be live; `out` must be writable.
 */
enum VoxsrStatus voxsr_mse(const struct VoxsrVolume *a, const struct VoxsrVolume *b, double *out);

/**
 * Fresh network with the training initialization.
 *
 * # Safety
 * `out` must be writable.
 */
enum VoxsrStatus voxsr_network_init(struct VoxsrNetworkConfig config,
                                    uint64_t seed,
                                    struct VoxsrNetwork **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum VoxsrStatus voxsr_network_load(const char *path, struct VoxsrNetwork **out);

/**
 * # Safety
 * `net` must be a live handle; `path` a NUL-terminated string.
 */
enum VoxsrStatus voxsr_network_save(const struct VoxsrNetwork *net, const char *path);

/**
 * # Safety
 * `net` must be a live handle; `config` must be writable.
 */
enum VoxsrStatus voxsr_network_config(const struct VoxsrNetwork *net,
                                      struct VoxsrNetworkConfig *config);

/**
 * Release a network. Null is ignored.
 *
 * # Safety
 * `net` must be null or a handle not yet freed.
 */
void voxsr_network_free(struct VoxsrNetwork *net);

/**
 * Upscale `lr` by `factor` with tiled inference. `margin` is a voxel count
 * or [`VOXSR_MARGIN_AUTO`].
 *
 * # Safety
 * Both handles must be live; `out` must be writable.
 */
enum VoxsrStatus voxsr_super_resolve(const struct VoxsrNetwork *net,
                                     const struct VoxsrVolume *lr,
                                     size_t factor,
                                     size_t tile,
                                     int64_t margin,
                                     struct VoxsrVolume **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VOXSR_H */
