# App package for the pilot-wave laboratory
