#include "api.h"

typedef void (*void_fn)(void);

static int scale(int x) { return x * 2; }

static volatile void_fn bad_slot;

void run_cb(void) {
    bad_slot = (void_fn)scale;  /* wrong type on purpose */
    bad_slot();
}
