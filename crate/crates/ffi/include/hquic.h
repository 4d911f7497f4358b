#ifndef HQUIC_H
#define HQUIC_H

#include <stddef.h>
#include <stdint.h>

// Result of every fallible call.
typedef enum HquicStatus {
  HQUIC_STATUS_OK = 0,
  HQUIC_STATUS_NULL_POINTER = 1,
  HQUIC_STATUS_INVALID_ARGUMENT = 2,
  HQUIC_STATUS_NOT_FOUND = 3,
  HQUIC_STATUS_IO = 4,
  HQUIC_STATUS_FORMAT = 5,
  HQUIC_STATUS_INCOMPATIBLE = 6,
  HQUIC_STATUS_DECODE = 7,
  HQUIC_STATUS_INTERNAL = 8,
} HquicStatus;

// A loaded, frozen model. Opaque to C.
typedef struct HquicModel HquicModel;

// Library-owned bytes. Release with [`hquic_buffer_free`].
typedef struct HquicBuffer {
  uint8_t *data;
  size_t len;
} HquicBuffer;

// Library-owned packed RGB8 image, row-major, `3 * width * height` bytes.
// Release with [`hquic_image_free`].
typedef struct HquicImage {
  uint8_t *pixels;
  size_t width;
  size_t height;
} HquicImage;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *hquic_version(void);

// Message of the last failed call on this thread, or an empty string.
// Valid until the next failing call on the same thread.
const char *hquic_last_error(void);

// Loads a checkpoint and tabulates its entropy model.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum HquicStatus hquic_model_load(const char *path, struct HquicModel **out);

// # Safety
// `model` must be null or a handle from [`hquic_model_load`] not yet freed.
void hquic_model_free(struct HquicModel *model);

// Writes the 8-byte model identity that bitstreams are checked against.
//
// # Safety
// `model` must be a live handle; `out` must point to 8 writable bytes.
enum HquicStatus hquic_model_param_hash(const struct HquicModel *model, uint8_t *out);

// Compresses a packed RGB8 image into a bitstream.
//
// # Safety
// `model` must be a live handle, `pixels` must hold `3 * width * height`
// bytes, and `out` must be writable.
enum HquicStatus hquic_compress(const struct HquicModel *model,
                                const uint8_t *pixels,
                                size_t width,
                                size_t height,
                                struct HquicBuffer *out);

// Decodes a bitstream produced by the same model.
//
// # Safety
// `model` must be a live handle, `data` must hold `len` readable bytes, and
// `out` must be writable.
enum HquicStatus hquic_decompress(const struct HquicModel *model,
                                  const uint8_t *data,
                                  size_t len,
                                  struct HquicImage *out);

// PSNR in dB between two packed RGB8 images of equal size. Identical
// images give +infinity.
//
// # Safety
// `a` and `b` must each hold `3 * width * height` bytes; `out` must be
// writable.
enum HquicStatus hquic_psnr(const uint8_t *a,
                            const uint8_t *b,
                            size_t width,
                            size_t height,
                            double *out);

// Releases a buffer from [`hquic_compress`] and resets it. Null-safe.
//
// # Safety
// `buf` must be null or point to a buffer returned by this library.
void hquic_buffer_free(struct HquicBuffer *buf);

// Releases an image from [`hquic_decompress`] and resets it. Null-safe.
//
// # Safety
// `img` must be null or point to an image returned by this library.
void hquic_image_free(struct HquicImage *img);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HQUIC_H */
