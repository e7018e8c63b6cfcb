#include <stdio.h>
#include <string.h>

int main(void) {
    char filename[64];
    char greeting[80];
    if (scanf("%63s", filename) != 1) {
        return 1;
    }
    snprintf(greeting, sizeof(greeting), "Loaded %s", filename);
    printf("%s\n", greeting);
    return 0;
}
