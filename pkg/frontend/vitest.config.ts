import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["tests/**/*.test.ts"],
    // integration tests spawn a real service process
    testTimeout: 30_000,
    hookTimeout: 60_000,
    environmentOptions: {
      // same origin as the ui test's service, so its fetches need no CORS
      happyDOM: { url: "http://127.0.0.1:8932" },
    },
  },
});
