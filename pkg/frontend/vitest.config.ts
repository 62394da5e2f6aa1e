import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    environment: "happy-dom",
    include: ["test/**/*.test.ts"],
    // integration tests spawn the real service and run background jobs
    testTimeout: 120_000,
    hookTimeout: 120_000,
    fileParallelism: false,
  },
});
